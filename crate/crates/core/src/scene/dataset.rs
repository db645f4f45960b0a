//! A dataset on disk is a directory of `scene_NNNNN.json` files read back in
//! name order.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Sample, Scene};
use crate::error::{Error, Result};

pub const SCENE_FILE_PREFIX: &str = "scene_";

pub fn scene_file_name(index: usize) -> String {
    format!("{SCENE_FILE_PREFIX}{index:05}.json")
}

/// Writes `scenes` into `dir` (created if needed) and returns the file paths.
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let path = dir.join(scene_file_name(i));
            s.write(&path)?;
            Ok(path)
        })
        .collect()
}

pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        if name.starts_with(SCENE_FILE_PREFIX) && name.ends_with(".json") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no scene files",
            dir.display()
        )));
    }
    Ok(files)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    dataset_files(dir)?.iter().map(|p| Scene::read(p)).collect()
}

pub fn read_samples(dir: &Path) -> Result<Vec<Sample>> {
    read_dataset(dir)?.iter().map(Sample::from_scene).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::tests::two_agent_scene;

    #[test]
    fn round_trip_keeps_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = two_agent_scene();
        let mut b = two_agent_scene();
        b.frame_rate = 5.0;
        let paths = write_dataset(dir.path(), &[a.clone(), b.clone()]).unwrap();
        assert_eq!(paths[1].file_name().unwrap(), "scene_00001.json");
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), vec![a, b]);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::InvalidInput(_))
        ));
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{procedural_dataset, DegradeError, Result};
use crate::image::{self, Format, Image};

/// Where evaluation or training images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    /// A directory of PGM/PPM/PNG files, or a JSON manifest listing paths.
    Path { path: PathBuf },
    /// Seeded synthetic images.
    Procedural { seed: u64, count: usize, height: usize, width: usize },
}

impl DatasetSource {
    /// Loads every image converted to `channels`.
    pub fn load(&self, channels: usize) -> Result<Vec<Image>> {
        match self {
            DatasetSource::Path { path } => load_dataset(path, channels),
            &DatasetSource::Procedural { seed, count, height, width } => {
                if count == 0 || height == 0 || width == 0 {
                    return Err(DegradeError::Dataset("procedural dataset must be non-empty".into()));
                }
                Ok(procedural_dataset(seed, count, channels, height, width))
            }
        }
    }
}

/// Reads a dataset from a directory (files sorted by name, non-image files
/// ignored) or from a JSON manifest `["a.pgm", ...]` whose relative paths
/// resolve against the manifest's directory.
pub fn load_dataset(path: &Path, channels: usize) -> Result<Vec<Image>> {
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| DegradeError::Dataset(format!("{}: {e}", path.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && Format::from_path(p).is_some())
            .collect();
        files.sort();
        files
    } else {
        let text =
            std::fs::read_to_string(path).map_err(|e| DegradeError::Dataset(format!("{}: {e}", path.display())))?;
        let listed: Vec<PathBuf> = serde_json::from_str(&text)
            .map_err(|e| DegradeError::Dataset(format!("manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        listed.into_iter().map(|p| if p.is_absolute() { p } else { base.join(p) }).collect()
    };
    if files.is_empty() {
        return Err(DegradeError::Dataset(format!("no images in {}", path.display())));
    }
    files
        .iter()
        .map(|f| {
            let img = image::load(f).map_err(|e| DegradeError::Dataset(format!("{}: {e}", f.display())))?;
            Ok(img.with_channels(channels)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let a = Image::filled(1, 4, 5, 10.0);
        let b = Image::filled(3, 6, 6, 200.0);
        image::save(&a, dir.path().join("a.pgm")).unwrap();
        image::save(&b, dir.path().join("b.ppm")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let set = load_dataset(dir.path(), 1).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set[0], a);
        assert_eq!(set[1].channels(), 1);

        let manifest = dir.path().join("list.json");
        std::fs::write(&manifest, r#"["b.ppm"]"#).unwrap();
        let set = load_dataset(&manifest, 3).unwrap();
        assert_eq!(set, vec![b]);

        let empty = tempfile::tempdir().unwrap();
        assert!(load_dataset(empty.path(), 1).is_err());
    }

    #[test]
    fn source_json() {
        let src: DatasetSource =
            serde_json::from_str(r#"{"source":"procedural","seed":1,"count":2,"height":8,"width":8}"#).unwrap();
        assert_eq!(src.load(1).unwrap().len(), 2);
    }
}

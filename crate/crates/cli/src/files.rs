//! Directory conventions: NIfTI files are matched across directories by
//! subject id, the file name without extension and without a trailing
//! `_img` or `_mask`.

use std::path::{Path, PathBuf};

use deepbet_core::nifti::read_nifti;
use deepbet_core::Volume;

use crate::error::{CliError, CliResult};

pub fn is_nifti(p: &Path) -> bool {
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// File name without `.nii` / `.nii.gz`.
pub fn stem(p: &Path) -> String {
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.strip_suffix(".gz")
        .unwrap_or(name)
        .strip_suffix(".nii")
        .unwrap_or(name)
        .to_string()
}

pub fn subject_id(p: &Path) -> String {
    let s = stem(p);
    for suffix in ["_img", "_mask"] {
        if let Some(id) = s.strip_suffix(suffix) {
            return id.to_string();
        }
    }
    s
}

/// NIfTI files in `dir`, sorted by name.
pub fn list_nifti(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?.path();
        if p.is_file() && is_nifti(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

pub fn read(p: &Path) -> CliResult<Volume> {
    read_nifti(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

/// `(id, image path, mask path)` for every `*_img` file with a `*_mask`
/// partner.
pub fn training_pairs(dir: &Path) -> CliResult<Vec<(String, PathBuf, PathBuf)>> {
    let files = list_nifti(dir)?;
    let mut pairs = Vec::new();
    for img in files.iter().filter(|p| stem(p).ends_with("_img")) {
        let id = subject_id(img);
        let mask = files.iter().find(|p| stem(p) == format!("{id}_mask")).ok_or_else(|| {
            CliError::Data(format!("{} has no matching {id}_mask file", img.display()))
        })?;
        pairs.push((id, img.clone(), mask.clone()));
    }
    if pairs.is_empty() {
        return Err(CliError::Data(format!("no *_img/*_mask pairs in {}", dir.display())));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_strip_extension_and_role() {
        assert_eq!(subject_id(Path::new("a/sub-01_img.nii.gz")), "sub-01");
        assert_eq!(subject_id(Path::new("sub-01_mask.nii")), "sub-01");
        assert_eq!(subject_id(Path::new("sub-01.nii.gz")), "sub-01");
        assert_eq!(stem(Path::new("x.nii.gz")), "x");
    }
}

use std::fs;
use std::path::Path;

use super::{BundleGroundTruth, GroundTruth};
use crate::streamline::{read_tck, write_tck};
use crate::volume::nifti::{read_nifti, write_nifti_as, Datatype};
use crate::volume::{MapKind, ScalarMap};
use crate::{Error, Result};

const INDEX: &str = "bundles.txt";

/// Writes `bundles.txt` (one name per line) and, per bundle,
/// `<name>_{mask,head,tail}.nii` plus `<name>_reference.tck` into `dir`.
pub fn write_ground_truth(gt: &GroundTruth, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    for b in &gt.bundles {
        index.push_str(&b.name);
        index.push('\n');
        for (suffix, map) in [("mask", &b.mask), ("head", &b.head), ("tail", &b.tail)] {
            write_nifti_as(&map.to_nifti(), &dir.join(format!("{}_{suffix}.nii", b.name)), Datatype::Uint8)?;
        }
        write_tck(&b.streamlines, &dir.join(format!("{}_reference.tck", b.name)))?;
    }
    fs::write(dir.join(INDEX), index)?;
    Ok(())
}

pub fn read_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let index = fs::read_to_string(dir.join(INDEX))?;
    let mut bundles = Vec::new();
    for name in index.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let map = |suffix: &str| -> Result<ScalarMap> {
            ScalarMap::from_nifti(&read_nifti(&dir.join(format!("{name}_{suffix}.nii")))?, MapKind::WhiteMatterMask)
        };
        let (mask, head, tail) = (map("mask")?, map("head")?, map("tail")?);
        if mask.dims() != head.dims() || mask.dims() != tail.dims() {
            return Err(Error::format(format!("bundle {name} masks disagree on grid size")));
        }
        let streamlines = read_tck(&dir.join(format!("{name}_reference.tck")))?;
        bundles.push(BundleGroundTruth { name: name.to_string(), mask, head, tail, streamlines });
    }
    if bundles.is_empty() {
        return Err(Error::format(format!("{} lists no bundles", dir.join(INDEX).display())));
    }
    let dims = bundles[0].mask.dims();
    if bundles.iter().any(|b| b.mask.dims() != dims) {
        return Err(Error::format("bundles disagree on grid size"));
    }
    Ok(GroundTruth { bundles })
}

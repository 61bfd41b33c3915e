//! Directory-backed datasets: one subdirectory per class, PPM or PNG files
//! inside. Class order and sample order are fully deterministic so splits
//! and training runs reproduce bit-for-bit.

use std::fs;
use std::path::{Path, PathBuf};

use fmdnn_core::Rng;

use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Sample {
    pub path: PathBuf,
    pub class: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("ppm") | Some("png")
    )
}

/// Scan `root/<class>/*.{ppm,png}`. Classes are sorted lexicographically
/// and samples by path.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", root.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "no class directories under {}",
            root.display()
        )));
    }

    let mut classes = Vec::new();
    let mut samples = Vec::new();
    for (k, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Dataset(format!("unreadable class name {}", dir.display())))?
            .to_owned();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class {name:?} has no images")));
        }
        for path in files {
            samples.push(Sample { path, class: k });
        }
        classes.push(name);
    }
    Ok(Dataset {
        root: root.to_owned(),
        classes,
        samples,
    })
}

/// Index lists into `Dataset::samples` for the three splits, plus any
/// warnings about classes too small to stratify.
pub struct SplitOutcome {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Stratified split: per class, shuffle with the seed, allocate floor
/// shares to val and test, and give train the remainder. A class with
/// fewer samples than populated splits goes entirely to train, with a
/// warning.
pub fn split_dataset(ds: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<SplitOutcome> {
    let (rt, rv, rs) = ratios;
    if rt < 0.0 || rv < 0.0 || rs < 0.0 || rt == 0.0 {
        return Err(Error::Config(format!(
            "split ratios ({rt}, {rv}, {rs}) must be nonnegative with train > 0"
        )));
    }
    if ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios ({rt}, {rv}, {rs}) must sum to 1"
        )));
    }

    let mut rng = Rng::seed_from_u64(seed);
    let populated = 1 + (rv > 0.0) as usize + (rs > 0.0) as usize;
    let mut out = SplitOutcome {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        warnings: Vec::new(),
    };

    for k in 0..ds.class_count() {
        let mut idxs: Vec<usize> = ds
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.class == k)
            .map(|(i, _)| i)
            .collect();
        rng.shuffle(&mut idxs);
        let n = idxs.len();
        if n < populated {
            out.warnings.push(format!(
                "class {:?} has only {n} sample(s); keeping all in train",
                ds.classes[k]
            ));
            out.train.extend(idxs);
            continue;
        }
        let n_val = (n as f64 * rv).floor() as usize;
        let n_test = (n as f64 * rs).floor() as usize;
        let n_train = n - n_val - n_test;
        out.train.extend(&idxs[..n_train]);
        out.val.extend(&idxs[n_train..n_train + n_val]);
        out.test.extend(&idxs[n_train + n_val..]);
    }
    Ok(out)
}

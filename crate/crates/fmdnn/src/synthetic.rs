//! Seeded synthetic texture datasets. Classes differ in blob structure
//! (density, size, elongation) rather than color or brightness, so a
//! classifier has to pick up spatial statistics instead of a trivial
//! channel-mean cue. Everything derives from the seed; the same call
//! produces byte-identical files.

use std::fs;
use std::path::Path;

use fmdnn_core::{num, Rng};

use crate::ppm::write_ppm;
use crate::{Error, Result};

struct ClassRecipe {
    name: &'static str,
    blobs: usize,
    radius: f64,
    stretch_x: f64,
    stretch_y: f64,
}

/// Blob counts scale with radius so total bright mass stays comparable
/// across classes; only the texture differs.
const RECIPES: [ClassRecipe; 4] = [
    ClassRecipe {
        name: "dense_small",
        blobs: 26,
        radius: 2.1,
        stretch_x: 1.0,
        stretch_y: 1.0,
    },
    ClassRecipe {
        name: "sparse_large",
        blobs: 5,
        radius: 5.2,
        stretch_x: 1.0,
        stretch_y: 1.0,
    },
    ClassRecipe {
        name: "streaks_horizontal",
        blobs: 11,
        radius: 2.6,
        stretch_x: 3.2,
        stretch_y: 0.8,
    },
    ClassRecipe {
        name: "streaks_vertical",
        blobs: 11,
        radius: 2.6,
        stretch_x: 0.8,
        stretch_y: 3.2,
    },
];

/// Render one image of the given class recipe.
fn render(recipe: &ClassRecipe, size: usize, rng: &mut Rng) -> Vec<u8> {
    let mut lum = vec![0.0f64; size * size];
    for _ in 0..recipe.blobs {
        let cx = rng.uniform_in(0.0, size as f64);
        let cy = rng.uniform_in(0.0, size as f64);
        let amp = rng.uniform_in(0.45, 0.85);
        let rx = recipe.radius * recipe.stretch_x * rng.uniform_in(0.8, 1.2);
        let ry = recipe.radius * recipe.stretch_y * rng.uniform_in(0.8, 1.2);
        // only touch pixels within 3 sigma of the center
        let x0 = ((cx - 3.0 * rx).floor().max(0.0)) as usize;
        let x1 = ((cx + 3.0 * rx).ceil().min(size as f64 - 1.0)) as usize;
        let y0 = ((cy - 3.0 * ry).floor().max(0.0)) as usize;
        let y1 = ((cy + 3.0 * ry).ceil().min(size as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                lum[y * size + x] += amp * num::exp(-0.5 * (dx * dx + dy * dy));
            }
        }
    }
    let mut rgb = vec![0u8; 3 * size * size];
    for (i, l) in lum.iter().enumerate() {
        let noise = rng.uniform_in(0.0, 0.04);
        let v = (0.08 + noise + l).clamp(0.0, 1.0);
        // identical tint for every class: structure is the only cue
        let chans = [v, v * 0.97, v * 0.93];
        for (c, &cv) in chans.iter().enumerate() {
            rgb[i * 3 + c] = (cv * 255.0).round() as u8;
        }
    }
    rgb
}

/// Write `classes` subdirectories of `per_class` PPM images each.
pub fn generate(
    root: &Path,
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<()> {
    if !(2..=RECIPES.len()).contains(&classes) {
        return Err(Error::Config(format!(
            "synthetic dataset supports 2..={} classes, got {classes}",
            RECIPES.len()
        )));
    }
    if per_class == 0 || size < 8 {
        return Err(Error::Config(format!(
            "need per_class >= 1 and size >= 8, got {per_class} and {size}"
        )));
    }
    for (k, recipe) in RECIPES.iter().take(classes).enumerate() {
        let dir = root.join(format!("{k}_{}", recipe.name));
        fs::create_dir_all(&dir)?;
        for i in 0..per_class {
            // per-image stream so file contents do not depend on the order
            // images are generated in
            let mut rng =
                Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E3779B97F4A7C15) ^ i as u64);
            let rgb = render(recipe, size, &mut rng);
            write_ppm(&dir.join(format!("img{i:04}.ppm")), size, size, &rgb)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_dataset;

    #[test]
    fn generates_loadable_dataset() {
        let dir = tempfile::tempdir().unwrap();
        generate(dir.path(), 2, 3, 32, 9).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.classes, vec!["0_dense_small", "1_sparse_large"]);
        assert_eq!(ds.len(), 6);
        let img = crate::ppm::load_image(&ds.samples[0].path).unwrap();
        assert_eq!(img.shape, vec![3, 32, 32]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(a.path(), 2, 2, 16, 4).unwrap();
        generate(b.path(), 2, 2, 16, 4).unwrap();
        let fa = std::fs::read(a.path().join("0_dense_small/img0000.ppm")).unwrap();
        let fb = std::fs::read(b.path().join("0_dense_small/img0000.ppm")).unwrap();
        assert_eq!(fa, fb);
        let c = tempfile::tempdir().unwrap();
        generate(c.path(), 2, 2, 16, 5).unwrap();
        let fc = std::fs::read(c.path().join("0_dense_small/img0000.ppm")).unwrap();
        assert_ne!(fa, fc);
    }

    #[test]
    fn class_count_bounds() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate(dir.path(), 1, 2, 16, 0).is_err());
        assert!(generate(dir.path(), 5, 2, 16, 0).is_err());
        generate(dir.path(), 4, 1, 16, 0).unwrap();
    }

    #[test]
    fn classes_differ_in_structure_not_brightness() {
        let dir = tempfile::tempdir().unwrap();
        generate(dir.path(), 2, 8, 32, 11).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let mean_of = |class: usize| -> f64 {
            let samples: Vec<_> = ds.samples.iter().filter(|s| s.class == class).collect();
            let mut acc = 0.0;
            let mut n = 0.0;
            for s in &samples {
                let img = crate::ppm::load_image(&s.path).unwrap();
                acc += img.data.iter().sum::<f64>();
                n += img.data.len() as f64;
            }
            acc / n
        };
        let (m0, m1) = (mean_of(0), mean_of(1));
        // structural classes should not be separable by global mean alone
        assert!(
            (m0 - m1).abs() < 0.1,
            "brightness gap too large: {m0} vs {m1}"
        );
    }
}

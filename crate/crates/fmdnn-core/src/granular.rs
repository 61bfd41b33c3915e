//! Multi-granular feature extraction.
//!
//! A small encoder-decoder: one full-resolution 3x3 conv, two conv+pool
//! stages down to H/4, then two transposed-conv stages back up with skip
//! concatenation from the matching encoder map. 1x1 taps emit the three
//! feature maps: fine at H/4 (most channels), medium at H/2, coarse at
//! full resolution. Channel counts scale by r^2 = 4 between levels while
//! the patch side halves, so all three branches flatten to the same
//! per-patch length and the same token count N = (H/P)^2.
//!
//! Stages that no enabled branch consumes are not created at all: the
//! optimizer requires a gradient for every parameter, so a masked branch
//! must not leave orphan weights behind.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fuzzy::patch_indices;
use crate::graph::{Graph, Var};
use crate::params::{he_normal, xavier_normal, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which granularity branches are enabled. Masks implement the
/// branch-ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchMask {
    pub coarse: bool,
    pub medium: bool,
    pub fine: bool,
}

impl Default for BranchMask {
    fn default() -> Self {
        BranchMask {
            coarse: true,
            medium: true,
            fine: true,
        }
    }
}

impl BranchMask {
    pub fn validate(&self) -> Result<()> {
        if !(self.coarse || self.medium || self.fine) {
            return Err(Error::Config("no granularity branch enabled".into()));
        }
        Ok(())
    }

    pub fn active_count(&self) -> usize {
        self.coarse as usize + self.medium as usize + self.fine as usize
    }

    /// Comma-separated branch names, e.g. "fine,medium" or "all".
    pub fn parse(s: &str) -> Result<Self> {
        let trimmed = s.trim();
        if trimmed == "all" {
            return Ok(BranchMask::default());
        }
        let mut mask = BranchMask {
            coarse: false,
            medium: false,
            fine: false,
        };
        for part in trimmed.split(',') {
            match part.trim() {
                "coarse" => mask.coarse = true,
                "medium" => mask.medium = true,
                "fine" => mask.fine = true,
                other => {
                    return Err(Error::Config(alloc::format!(
                        "unknown branch {other:?}; expected coarse, medium, fine or all"
                    )))
                }
            }
        }
        mask.validate()?;
        Ok(mask)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.fine {
            parts.push("fine");
        }
        if self.medium {
            parts.push("medium");
        }
        if self.coarse {
            parts.push("coarse");
        }
        parts.join(",")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GranularityConfig {
    pub h: usize,
    pub w: usize,
    /// Downsampling factor between granularity levels. The two-stage
    /// encoder-decoder realizes exactly r = 2.
    pub r: usize,
    /// Coarse patch size; medium uses P/r, fine P/2r.
    pub p: usize,
    pub c_coarse: usize,
    pub c_medium: usize,
    pub c_fine: usize,
}

impl GranularityConfig {
    pub fn standard(h: usize, p: usize) -> Self {
        GranularityConfig {
            h,
            w: h,
            r: 2,
            p,
            c_coarse: 3,
            c_medium: 12,
            c_fine: 48,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r != 2 {
            return Err(Error::Config(alloc::format!(
                "granularity r = {} unsupported; the two-stage extractor fixes r = 2",
                self.r
            )));
        }
        if self.p == 0 || self.p % (2 * self.r) != 0 {
            return Err(Error::Config(alloc::format!(
                "patch size {} must be divisible by 2r = {}",
                self.p,
                2 * self.r
            )));
        }
        if self.h == 0 || self.w == 0 || self.h % self.p != 0 || self.w % self.p != 0 {
            return Err(Error::Config(alloc::format!(
                "image {}x{} not divisible by patch size {}",
                self.h,
                self.w,
                self.p
            )));
        }
        if self.c_coarse == 0 || self.c_medium == 0 || self.c_fine == 0 {
            return Err(Error::Config("zero channel count".into()));
        }
        Ok(())
    }

    /// Tokens per branch.
    pub fn n_tokens(&self) -> usize {
        (self.h / self.p) * (self.w / self.p)
    }

    /// (side divisor, channels, patch side) per level: coarse, medium, fine.
    pub fn levels(&self) -> [(usize, usize, usize); 3] {
        [
            (1, self.c_coarse, self.p),
            (self.r, self.c_medium, self.p / self.r),
            (2 * self.r, self.c_fine, self.p / (2 * self.r)),
        ]
    }

    /// Flattened per-patch length per level: coarse, medium, fine.
    pub fn patch_lens(&self) -> [usize; 3] {
        self.levels().map(|(_, c, ps)| ps * ps * c)
    }
}

/// The three feature maps as plain values.
pub struct GranularFeatures {
    pub coarse: Tensor,
    pub medium: Tensor,
    pub fine: Tensor,
}

/// Shape diagnostics; empty `failures` means the contract holds.
pub struct ShapeReport {
    pub n_tokens: usize,
    pub patch_lens: [usize; 3],
    pub failures: Vec<String>,
}

impl ShapeReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Check the three maps against the config's shape contract. Reports every
/// violation instead of failing on the first.
pub fn validate_shapes(features: &GranularFeatures, cfg: &GranularityConfig) -> ShapeReport {
    let mut failures = Vec::new();
    let maps = [
        ("coarse", &features.coarse),
        ("medium", &features.medium),
        ("fine", &features.fine),
    ];
    for ((name, map), (div, c, _)) in maps.iter().zip(cfg.levels()) {
        let want = [c, cfg.h / div, cfg.w / div];
        if map.shape != want {
            failures.push(alloc::format!(
                "{name} map: expected {want:?}, got {:?}",
                map.shape
            ));
        }
        if !map.all_finite() {
            failures.push(alloc::format!("{name} map: non-finite values"));
        }
    }
    // token counts must agree across granularities
    let mut n_tokens = cfg.n_tokens();
    let counts: Vec<usize> = cfg
        .levels()
        .map(|(div, _, ps)| (cfg.h / div / ps) * (cfg.w / div / ps))
        .to_vec();
    if counts.iter().any(|&n| n != counts[0]) {
        failures.push(alloc::format!(
            "token counts differ across granularities: {counts:?}"
        ));
    } else {
        n_tokens = counts[0];
    }
    let patch_lens = cfg.patch_lens();
    if patch_lens.iter().any(|&l| l != patch_lens[0]) {
        failures.push(alloc::format!(
            "per-patch flattened lengths differ: {patch_lens:?}"
        ));
    }
    ShapeReport {
        n_tokens,
        patch_lens,
        failures,
    }
}

/// Internal encoder-decoder widths at the three resolutions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtractorWidths {
    pub c0: usize,
    pub c1: usize,
    pub c2: usize,
}

impl Default for ExtractorWidths {
    fn default() -> Self {
        ExtractorWidths {
            c0: 8,
            c1: 16,
            c2: 32,
        }
    }
}

struct ConvIds {
    w: ParamId,
    b: ParamId,
}

struct UpStage {
    up: ParamId,
    merge: ConvIds,
}

pub struct Extractor {
    widths: ExtractorWidths,
    mask: BranchMask,
    conv0: ConvIds,
    enc1: ConvIds,
    enc2: ConvIds,
    dec1: Option<UpStage>,
    dec2: Option<UpStage>,
    tap_fine: Option<ConvIds>,
    tap_medium: Option<ConvIds>,
    tap_coarse: Option<ConvIds>,
}

pub struct Taps {
    pub coarse: Option<Var>,
    pub medium: Option<Var>,
    pub fine: Option<Var>,
}

fn add_conv(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
) -> Result<ConvIds> {
    let w = store.add(
        &alloc::format!("{name}.w"),
        he_normal(rng, &[co, ci, k, k], ci * k * k),
    )?;
    let b = store.add(&alloc::format!("{name}.b"), Tensor::zeros(&[co]))?;
    Ok(ConvIds { w, b })
}

impl Extractor {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        cfg: &GranularityConfig,
        widths: ExtractorWidths,
        mask: BranchMask,
    ) -> Result<Self> {
        cfg.validate()?;
        mask.validate()?;
        let ExtractorWidths { c0, c1, c2 } = widths;
        if cfg.h % 4 != 0 || cfg.w % 4 != 0 {
            return Err(Error::Config(alloc::format!(
                "image {}x{} must be divisible by 4 for two pooling stages",
                cfg.h,
                cfg.w
            )));
        }
        let conv0 = add_conv(store, rng, "ext.conv0", c0, 3, 3)?;
        let enc1 = add_conv(store, rng, "ext.enc1", c1, c0, 3)?;
        let enc2 = add_conv(store, rng, "ext.enc2", c2, c1, 3)?;
        let tap_fine = if mask.fine {
            Some(add_conv(store, rng, "ext.tap_fine", cfg.c_fine, c2, 1)?)
        } else {
            None
        };
        let dec1 = if mask.medium || mask.coarse {
            Some(UpStage {
                up: store.add("ext.up1.w", he_normal(rng, &[c2, c1, 2, 2], c2 * 4))?,
                merge: add_conv(store, rng, "ext.dec1", c1, 2 * c1, 3)?,
            })
        } else {
            None
        };
        let tap_medium = if mask.medium {
            Some(add_conv(store, rng, "ext.tap_medium", cfg.c_medium, c1, 1)?)
        } else {
            None
        };
        let dec2 = if mask.coarse {
            Some(UpStage {
                up: store.add("ext.up2.w", he_normal(rng, &[c1, c0, 2, 2], c1 * 4))?,
                merge: add_conv(store, rng, "ext.dec2", c0, 2 * c0, 3)?,
            })
        } else {
            None
        };
        let tap_coarse = if mask.coarse {
            Some(add_conv(store, rng, "ext.tap_coarse", cfg.c_coarse, c0, 1)?)
        } else {
            None
        };
        Ok(Extractor {
            widths,
            mask,
            conv0,
            enc1,
            enc2,
            dec1,
            dec2,
            tap_fine,
            tap_medium,
            tap_coarse,
        })
    }

    pub fn widths(&self) -> ExtractorWidths {
        self.widths
    }

    pub fn mask(&self) -> BranchMask {
        self.mask
    }

    fn conv_unit(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ids: &ConvIds,
        pad: usize,
    ) -> Result<Var> {
        let w = store.on_graph(g, ids.w);
        let b = store.on_graph(g, ids.b);
        let y = g.conv2d(x, w, 1, pad)?;
        let y = g.add_chan_bias(y, b)?;
        Ok(g.relu(y))
    }

    /// Linear 1x1 tap; no activation so downstream embeddings see signed
    /// features and activation maps keep their raw scale.
    fn tap(&self, g: &mut Graph, store: &ParamStore, x: Var, ids: &ConvIds) -> Result<Var> {
        let w = store.on_graph(g, ids.w);
        let b = store.on_graph(g, ids.b);
        let y = g.conv2d(x, w, 1, 0)?;
        g.add_chan_bias(y, b)
    }

    fn up_stage(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        skip: Var,
        stage: &UpStage,
    ) -> Result<Var> {
        let w_up = store.on_graph(g, stage.up);
        let u = g.tconv2d(x, w_up, 2)?;
        let u = g.relu(u);
        let merged = g.concat(&[u, skip], 0)?;
        self.conv_unit(g, store, merged, &stage.merge, 1)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Taps> {
        let e0 = self.conv_unit(g, store, image, &self.conv0, 1)?; // [c0, H, W]
        let c1 = self.conv_unit(g, store, e0, &self.enc1, 1)?;
        let e1 = g.max_pool(c1, 2)?; // [c1, H/2, W/2]
        let c2 = self.conv_unit(g, store, e1, &self.enc2, 1)?;
        let e2 = g.max_pool(c2, 2)?; // [c2, H/4, W/4]

        let fine = match &self.tap_fine {
            Some(ids) => Some(self.tap(g, store, e2, ids)?),
            None => None,
        };

        let d1 = match &self.dec1 {
            Some(stage) => Some(self.up_stage(g, store, e2, e1, stage)?), // [c1, H/2, W/2]
            None => None,
        };
        let medium = match (&self.tap_medium, d1) {
            (Some(ids), Some(d1)) => Some(self.tap(g, store, d1, ids)?),
            _ => None,
        };
        let d2 = match (&self.dec2, d1) {
            (Some(stage), Some(d1)) => Some(self.up_stage(g, store, d1, e0, stage)?), // [c0, H, W]
            _ => None,
        };
        let coarse = match (&self.tap_coarse, d2) {
            (Some(ids), Some(d2)) => Some(self.tap(g, store, d2, ids)?),
            _ => None,
        };

        Ok(Taps {
            coarse,
            medium,
            fine,
        })
    }
}

/// Per-branch embedding parameters: patch projection, class token,
/// positions for the N+1 token rows.
pub struct BranchEmbed {
    pub projection: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
}

impl BranchEmbed {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        patch_len: usize,
        n_tokens: usize,
        dim: usize,
    ) -> Result<Self> {
        Ok(BranchEmbed {
            projection: store.add(
                &alloc::format!("{prefix}.embed.w"),
                xavier_normal(rng, &[patch_len, dim], patch_len, dim),
            )?,
            cls: store.add(
                &alloc::format!("{prefix}.cls"),
                crate::params::normal_002(rng, &[1, dim]),
            )?,
            pos: store.add(
                &alloc::format!("{prefix}.pos"),
                crate::params::normal_002(rng, &[n_tokens + 1, dim]),
            )?,
        })
    }
}

/// Tokenize one feature map: cut into patches, project to D, prepend the
/// class token, add positions. Output is (N+1) x D with the class token at
/// row 0.
pub fn patch_embed(
    g: &mut Graph,
    store: &ParamStore,
    map: Var,
    patch_side: usize,
    embed: &BranchEmbed,
) -> Result<Var> {
    let (c, h, w) = {
        let t = g.value(map);
        t.expect_rank(3, "patch_embed map")?;
        (t.shape[0], t.shape[1], t.shape[2])
    };
    let indices = patch_indices(c, h, w, patch_side)?;
    let n = (h / patch_side) * (w / patch_side);
    let len = patch_side * patch_side * c;
    let tokens = g.gather(map, indices, &[n, len])?;
    let proj = store.on_graph(g, embed.projection);
    let projected = g.matmul(tokens, proj)?;
    let cls = store.on_graph(g, embed.cls);
    let seq = g.concat(&[cls, projected], 0)?;
    let pos = store.on_graph(g, embed.pos);
    g.add(seq, pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn small_cfg() -> GranularityConfig {
        GranularityConfig::standard(16, 8)
    }

    fn forward_features(cfg: &GranularityConfig, image: Tensor, seed: u64) -> GranularFeatures {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(seed);
        let ext = Extractor::new(
            &mut store,
            &mut rng,
            cfg,
            ExtractorWidths::default(),
            BranchMask::default(),
        )
        .unwrap();
        let mut g = Graph::new();
        let x = g.leaf(image);
        let taps = ext.forward(&mut g, &store, x).unwrap();
        GranularFeatures {
            coarse: g.value(taps.coarse.unwrap()).clone(),
            medium: g.value(taps.medium.unwrap()).clone(),
            fine: g.value(taps.fine.unwrap()).clone(),
        }
    }

    #[test]
    fn paper_scale_shape_contract() {
        let cfg = GranularityConfig::standard(224, 16);
        cfg.validate().unwrap();
        assert_eq!(cfg.n_tokens(), 196);
        assert_eq!(cfg.patch_lens(), [768, 768, 768]);
    }

    #[test]
    fn desk_scale_shape_contract() {
        let cfg = GranularityConfig::standard(64, 8);
        cfg.validate().unwrap();
        assert_eq!(cfg.n_tokens(), 64);
        assert_eq!(cfg.patch_lens(), [192, 192, 192]);
    }

    #[test]
    fn extractor_tap_shapes() {
        let cfg = small_cfg();
        let f = forward_features(&cfg, Tensor::full(&[3, 16, 16], 0.5), 1);
        assert_eq!(f.coarse.shape, vec![3, 16, 16]);
        assert_eq!(f.medium.shape, vec![12, 8, 8]);
        assert_eq!(f.fine.shape, vec![48, 4, 4]);
        let report = validate_shapes(&f, &cfg);
        assert!(report.passed(), "{:?}", report.failures);
        assert_eq!(report.n_tokens, 4);
    }

    #[test]
    fn zero_input_gives_zero_maps() {
        // biases start at zero and every stage is linear around zero
        let f = forward_features(&small_cfg(), Tensor::zeros(&[3, 16, 16]), 2);
        assert!(f.coarse.data.iter().all(|&v| v == 0.0));
        assert!(f.medium.data.iter().all(|&v| v == 0.0));
        assert!(f.fine.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_branches_create_no_orphan_params() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(4);
        let mask = BranchMask {
            coarse: false,
            medium: false,
            fine: true,
        };
        let ext =
            Extractor::new(&mut store, &mut rng, &cfg, ExtractorWidths::default(), mask).unwrap();
        assert!(store.id("ext.tap_fine.w").is_some());
        assert!(store.id("ext.tap_medium.w").is_none());
        assert!(store.id("ext.up1.w").is_none());
        assert!(store.id("ext.dec2.w").is_none());

        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[3, 16, 16], 0.1));
        let taps = ext.forward(&mut g, &store, x).unwrap();
        assert!(taps.fine.is_some());
        assert!(taps.medium.is_none());
        assert!(taps.coarse.is_none());
    }

    #[test]
    fn validate_shapes_reports_wrong_resolution() {
        let cfg = small_cfg();
        let f = GranularFeatures {
            coarse: Tensor::zeros(&[3, 16, 16]),
            medium: Tensor::zeros(&[12, 4, 4]), // wrong: should be 8x8
            fine: Tensor::zeros(&[48, 4, 4]),
        };
        let report = validate_shapes(&f, &cfg);
        assert_eq!(report.failures.len(), 1);
        assert!(report.failures[0].contains("medium"));
        assert!(report.failures[0].contains("8"));
    }

    #[test]
    fn gradient_reaches_first_convolution() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(3);
        let ext = Extractor::new(
            &mut store,
            &mut rng,
            &cfg,
            ExtractorWidths::default(),
            BranchMask::default(),
        )
        .unwrap();
        let mut g = Graph::new();
        let img = Tensor::new(
            &[3, 16, 16],
            (0..3 * 256).map(|_| rng.uniform()).collect(),
        )
        .unwrap();
        let x = g.leaf(img);
        let taps = ext.forward(&mut g, &store, x).unwrap();
        // pull on all three taps so every path is exercised
        let sc = g.sum_all(taps.coarse.unwrap());
        let sm = g.sum_all(taps.medium.unwrap());
        let sf = g.sum_all(taps.fine.unwrap());
        let s1 = g.add(sc, sm).unwrap();
        let s = g.add(s1, sf).unwrap();
        let grads = g.backward(s).unwrap();
        store.accumulate(&g, &grads);
        let conv0 = store.id("ext.conv0.w").unwrap();
        let gr = store.get(conv0).grad.as_ref().unwrap();
        assert!(gr.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn deterministic_under_seed() {
        let img = {
            let mut rng = Rng::seed_from_u64(77);
            Tensor::new(&[3, 16, 16], (0..768).map(|_| rng.uniform()).collect()).unwrap()
        };
        let a = forward_features(&small_cfg(), img.clone(), 5);
        let b = forward_features(&small_cfg(), img, 5);
        assert_eq!(a.fine.data, b.fine.data);
        assert_eq!(a.medium.data, b.medium.data);
        assert_eq!(a.coarse.data, b.coarse.data);
    }

    #[test]
    fn branch_mask_parse() {
        assert_eq!(BranchMask::parse("all").unwrap(), BranchMask::default());
        let m = BranchMask::parse("fine, coarse").unwrap();
        assert!(m.fine && m.coarse && !m.medium);
        assert!(BranchMask::parse("tiny").is_err());
        assert_eq!(m.label(), "fine,coarse");
    }

    #[test]
    fn patch_embed_rows_and_permutation() {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(8);
        let embed = BranchEmbed::new(&mut store, &mut rng, "t", 4, 4, 6).unwrap();

        // 1-channel 4x4 map, patch side 2 -> 4 tokens of length 4
        let map = Tensor::new(&[1, 4, 4], (0..16).map(|i| i as f64).collect()).unwrap();
        let mut g = Graph::new();
        let m = g.leaf(map.clone());
        let seq = patch_embed(&mut g, &store, m, 2, &embed).unwrap();
        assert_eq!(g.value(seq).shape, vec![5, 6]);

        // swapping two input patches swaps the token rows (positions zeroed)
        store.set_value(embed.pos, Tensor::zeros(&[5, 6])).unwrap();
        store.set_value(embed.cls, Tensor::zeros(&[1, 6])).unwrap();
        let mut swapped = map.clone();
        // swap patch (0,0) [rows 0..2, cols 0..2] with patch (0,1) [cols 2..4]
        for y in 0..2 {
            for x in 0..2 {
                swapped.data.swap(y * 4 + x, y * 4 + x + 2);
            }
        }
        let mut g1 = Graph::new();
        let m1 = g1.leaf(map);
        let s1 = patch_embed(&mut g1, &store, m1, 2, &embed).unwrap();
        let mut g2 = Graph::new();
        let m2 = g2.leaf(swapped);
        let s2 = patch_embed(&mut g2, &store, m2, 2, &embed).unwrap();
        let (a, b) = (g1.value(s1), g2.value(s2));
        // token rows 1 and 2 swap, rows 3 and 4 unchanged
        assert_eq!(a.data[6..12], b.data[12..18]);
        assert_eq!(a.data[12..18], b.data[6..12]);
        assert_eq!(a.data[18..30], b.data[18..30]);
    }
}

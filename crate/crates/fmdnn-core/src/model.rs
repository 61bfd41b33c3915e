//! Full model assembly: fuzzy feature path, multi-granular extraction,
//! per-branch transformer stacks, classification head.
//!
//! One forward pass builds one graph. Parameters live in the `ParamStore`
//! and are placed on the graph as tagged leaves, so a backward sweep plus
//! `accumulate` yields gradients for exactly the parameters the
//! configuration creates. Construction is strict about that set: fusion
//! modes and branch masks that do not use a parameter do not create it.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fca::{
    classification_head, encoder_layer, fca_block, mlp_block, EncoderLayerIds, FcaBlockIds,
    HeadIds, MlpBlockIds, MlpMode,
};
use crate::fuzzy::{
    fuse_on_graph, fuzzy_features, fuzzy_patch_embed, grayscale, MembershipParams,
};
use crate::granular::{
    patch_embed, BranchEmbed, BranchMask, Extractor, ExtractorWidths, GranularityConfig, Taps,
};
use crate::graph::{Graph, Var};
use crate::params::{normal_002, xavier_normal, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How fuzzy information enters the transformer stacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Fuzzy tokens join the query sequence of every cross-attention block.
    Fca,
    /// Fuzzy tokens are projected and added to the patch tokens once,
    /// before the encoder stack.
    Add,
    /// Cross-attention blocks run with the class token alone; no fuzzy
    /// input anywhere.
    CrossAttn,
    /// Plain encoder stacks only.
    NoFuzzy,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "fca" => Ok(FusionMode::Fca),
            "add" => Ok(FusionMode::Add),
            "cross-attn" => Ok(FusionMode::CrossAttn),
            "none" => Ok(FusionMode::NoFuzzy),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?}; expected fca, add, cross-attn or none"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::Fca => "fca",
            FusionMode::Add => "add",
            FusionMode::CrossAttn => "cross-attn",
            FusionMode::NoFuzzy => "none",
        }
    }

    fn uses_fuzzy(&self) -> bool {
        matches!(self, FusionMode::Fca | FusionMode::Add)
    }

    fn uses_fca_blocks(&self) -> bool {
        matches!(self, FusionMode::Fca | FusionMode::CrossAttn)
    }
}

impl MlpMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "paper" => Ok(MlpMode::Paper),
            "prenorm" => Ok(MlpMode::Prenorm),
            other => Err(Error::Config(format!(
                "unknown mlp mode {other:?}; expected paper or prenorm"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MlpMode::Paper => "paper",
            MlpMode::Prenorm => "prenorm",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub classes: usize,
    pub widths: ExtractorWidths,
    pub fusion: FusionMode,
    pub branches: BranchMask,
    pub mlp_mode: MlpMode,
    pub membership: MembershipParams,
}

impl ModelConfig {
    /// Desk-scale default: big enough to train in minutes, small enough to
    /// finite-difference.
    pub fn desk(classes: usize) -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            dim: 64,
            layers: 2,
            heads: 4,
            classes,
            widths: ExtractorWidths::default(),
            fusion: FusionMode::Fca,
            branches: BranchMask::default(),
            mlp_mode: MlpMode::Paper,
            membership: MembershipParams::default(),
        }
    }

    pub fn granularity(&self) -> GranularityConfig {
        GranularityConfig::standard(self.image_size, self.patch_size)
    }

    pub fn n_tokens(&self) -> usize {
        self.granularity().n_tokens()
    }

    pub fn validate(&self) -> Result<()> {
        self.granularity().validate()?;
        self.branches.validate()?;
        self.membership.validate()?;
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one layer required".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "classes = {} but classification needs at least 2",
                self.classes
            )));
        }
        Ok(())
    }
}

struct FuzzyIds {
    w_logits: ParamId,
    bias: ParamId,
    embed: ParamId,
    pos: ParamId,
    add_proj: Option<ParamId>,
}

struct LayerIds {
    fca: Option<FcaBlockIds>,
    mlp: Option<MlpBlockIds>,
    enc: EncoderLayerIds,
}

struct BranchIds {
    /// 0 = coarse, 1 = medium, 2 = fine.
    level: usize,
    embed: BranchEmbed,
    layers: Vec<LayerIds>,
}

pub struct Fmdnn {
    cfg: ModelConfig,
    pub store: ParamStore,
    extractor: Extractor,
    fuzzy: Option<FuzzyIds>,
    branches: Vec<BranchIds>,
    head: HeadIds,
}

/// Handles into the forward graph for losses, probes and visualization.
pub struct ForwardOut {
    /// Raw class scores, shape [classes].
    pub logits: Var,
    pub coarse: Option<Var>,
    pub medium: Option<Var>,
    pub fine: Option<Var>,
    /// Fused fuzzy map, present when the fusion mode computes one.
    pub fused: Option<Var>,
}

impl Fmdnn {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(seed);
        let gran = cfg.granularity();
        let n = gran.n_tokens();
        let d = cfg.dim;

        let fuzzy = if cfg.fusion.uses_fuzzy() {
            let p2 = cfg.patch_size * cfg.patch_size;
            Some(FuzzyIds {
                w_logits: store.add("fuzzy.w_logits", Tensor::zeros(&[3]))?,
                bias: store.add("fuzzy.bias", Tensor::zeros(&[1]))?,
                embed: store.add(
                    "fuzzy.embed.w",
                    xavier_normal(&mut rng, &[p2, d], p2, d),
                )?,
                pos: store.add("fuzzy.pos", normal_002(&mut rng, &[n, d]))?,
                add_proj: if cfg.fusion == FusionMode::Add {
                    Some(store.add("fuzzy.add_proj", xavier_normal(&mut rng, &[d, d], d, d))?)
                } else {
                    None
                },
            })
        } else {
            None
        };

        let extractor = Extractor::new(&mut store, &mut rng, &gran, cfg.widths, cfg.branches)?;

        let patch_lens = gran.patch_lens();
        let mut branches = Vec::new();
        let order: [(&str, usize, bool); 3] = [
            ("fine", 2, cfg.branches.fine),
            ("medium", 1, cfg.branches.medium),
            ("coarse", 0, cfg.branches.coarse),
        ];
        for (name, level, active) in order {
            if !active {
                continue;
            }
            let embed =
                BranchEmbed::new(&mut store, &mut rng, name, patch_lens[level], n, d)?;
            let mut layers = Vec::new();
            for l in 0..cfg.layers {
                let (fca, mlp) = if cfg.fusion.uses_fca_blocks() {
                    (
                        Some(FcaBlockIds::new(
                            &mut store,
                            &mut rng,
                            &format!("{name}.l{l}.fca"),
                            d,
                            cfg.heads,
                        )?),
                        Some(MlpBlockIds::new(
                            &mut store,
                            &mut rng,
                            &format!("{name}.l{l}.mlp"),
                            d,
                            4 * d,
                        )?),
                    )
                } else {
                    (None, None)
                };
                let enc = EncoderLayerIds::new(
                    &mut store,
                    &mut rng,
                    &format!("{name}.l{l}.enc"),
                    d,
                    cfg.heads,
                    4 * d,
                )?;
                layers.push(LayerIds { fca, mlp, enc });
            }
            branches.push(BranchIds {
                level,
                embed,
                layers,
            });
        }

        let head = HeadIds::new(
            &mut store,
            &mut rng,
            cfg.branches.active_count(),
            d,
            cfg.classes,
        )?;

        Ok(Fmdnn {
            cfg,
            store,
            extractor,
            fuzzy,
            branches,
            head,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let want = [3, self.cfg.image_size, self.cfg.image_size];
        if image.shape != want {
            return Err(Error::Input(format!(
                "image shape {:?} does not match model input {want:?}",
                image.shape
            )));
        }
        if !image.all_finite() {
            return Err(Error::Input("image contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, image: &Tensor) -> Result<ForwardOut> {
        self.check_image(image)?;

        let (fused, fuzzy_tokens) = match &self.fuzzy {
            Some(fz) => {
                let gray = grayscale(image)?;
                let feat = fuzzy_features(&gray, &self.cfg.membership)?;
                let maps = [
                    g.leaf(feat.i_mu),
                    g.leaf(feat.i_sigma),
                    g.leaf(feat.i_t),
                ];
                let w_logits = self.store.on_graph(g, fz.w_logits);
                let bias = self.store.on_graph(g, fz.bias);
                let fused = fuse_on_graph(g, maps, w_logits, bias)?;
                let proj = self.store.on_graph(g, fz.embed);
                let pos = self.store.on_graph(g, fz.pos);
                let tokens = fuzzy_patch_embed(g, fused, self.cfg.patch_size, proj, pos)?;
                (Some(fused), Some(tokens))
            }
            None => (None, None),
        };

        let x = g.leaf(image.clone());
        let taps = self.extractor.forward(g, &self.store, x)?;
        let divisor = |level: usize| 1usize << level;

        let mut cls_tokens = Vec::new();
        for branch in &self.branches {
            let map = self
                .tap_for(&taps, branch.level)
                .ok_or_else(|| Error::Dimension("missing tap for active branch".into()))?;
            let patch_side = self.cfg.patch_size / divisor(branch.level);
            let mut z = patch_embed(g, &self.store, map, patch_side, &branch.embed)?;

            if self.cfg.fusion == FusionMode::Add {
                let tokens = fuzzy_tokens.ok_or_else(|| {
                    Error::Dimension("add fusion requires fuzzy tokens".into())
                })?;
                let proj = self
                    .fuzzy
                    .as_ref()
                    .and_then(|fz| fz.add_proj)
                    .ok_or_else(|| Error::Dimension("add fusion projection missing".into()))?;
                let proj = self.store.on_graph(g, proj);
                let injected = g.matmul(tokens, proj)?;
                let n = self.cfg.n_tokens();
                let cls_row = g.slice_rows(z, 0, 1)?;
                let patch_rows = g.slice_rows(z, 1, n)?;
                let shifted = g.add(patch_rows, injected)?;
                z = g.concat(&[cls_row, shifted], 0)?;
            }

            for layer in &branch.layers {
                if let Some(fca) = &layer.fca {
                    let ft = if self.cfg.fusion == FusionMode::Fca {
                        fuzzy_tokens
                    } else {
                        None
                    };
                    z = fca_block(g, &self.store, fca, z, ft)?;
                    let mlp = layer
                        .mlp
                        .as_ref()
                        .ok_or_else(|| Error::Dimension("fca layer missing mlp".into()))?;
                    z = mlp_block(g, &self.store, mlp, z, self.cfg.mlp_mode)?;
                }
                z = encoder_layer(g, &self.store, &layer.enc, z)?;
            }
            cls_tokens.push(g.slice_rows(z, 0, 1)?);
        }

        let logits = classification_head(g, &self.store, &self.head, &cls_tokens)?;
        Ok(ForwardOut {
            logits,
            coarse: taps.coarse,
            medium: taps.medium,
            fine: taps.fine,
            fused,
        })
    }

    fn tap_for(&self, taps: &Taps, level: usize) -> Option<Var> {
        match level {
            0 => taps.coarse,
            1 => taps.medium,
            _ => taps.fine,
        }
    }

    /// Forward plus cross-entropy against `label`. Returns (loss, out).
    pub fn loss(&self, g: &mut Graph, image: &Tensor, label: usize) -> Result<(Var, ForwardOut)> {
        if label >= self.cfg.classes {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                self.cfg.classes
            )));
        }
        let out = self.forward(g, image)?;
        let loss = g.cross_entropy(out.logits, label)?;
        Ok((loss, out))
    }

    /// Single-image prediction: argmax class and the raw logits.
    pub fn predict(&self, image: &Tensor) -> Result<(usize, Vec<f64>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image)?;
        let logits = g.value(out.logits).data.clone();
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        Ok((best, logits))
    }

    /// Human-readable one-line summary for logs.
    pub fn describe(&self) -> String {
        format!(
            "{}x{} p{} d{} l{} h{} k{} fusion={} branches={} params={}",
            self.cfg.image_size,
            self.cfg.image_size,
            self.cfg.patch_size,
            self.cfg.dim,
            self.cfg.layers,
            self.cfg.heads,
            self.cfg.classes,
            self.cfg.fusion.name(),
            self.cfg.branches.label(),
            self.store.num_scalars(),
        )
    }
}

/// Channel weights for a class activation map: the spatial mean of the
/// logit gradient over each channel of a [C, H, W] feature map.
pub fn cam_weights(grad: &[f64], channels: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    let hw = h * w;
    if grad.len() != channels * hw || hw == 0 {
        return Err(Error::Dimension(format!(
            "gradient length {} does not match {}x{}x{}",
            grad.len(),
            channels,
            h,
            w
        )));
    }
    Ok((0..channels)
        .map(|c| grad[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect())
}

/// Weighted channel sum followed by ReLU: non-negative [H, W] saliency.
pub fn cam_from(weights: &[f64], maps: &Tensor) -> Result<Tensor> {
    maps.expect_rank(3, "cam feature maps")?;
    let (c, h, w) = (maps.shape[0], maps.shape[1], maps.shape[2]);
    if weights.len() != c {
        return Err(Error::Dimension(format!(
            "{} weights for {} channels",
            weights.len(),
            c
        )));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[h, w]);
    for (k, &wk) in weights.iter().enumerate() {
        for i in 0..hw {
            out.data[i] += wk * maps.data[k * hw + i];
        }
    }
    for v in out.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(out)
}

//! Saliency rendering: hot-ramp heatmaps and class activation maps.

use std::path::Path;
use std::sync::Arc;

use fmdnn_core::model::{cam_from, cam_weights, Fmdnn};
use fmdnn_core::{Graph, Tensor, Var};

use crate::ppm::write_ppm;
use crate::{Error, Result};

/// Black through red and yellow to white.
pub fn hot_rgb(t: f64) -> [u8; 3] {
    let c = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [c(3.0 * t), c(3.0 * t - 1.0), c(3.0 * t - 2.0)]
}

pub fn upscale_nn(rgb: &[u8], w: usize, h: usize, factor: usize) -> (Vec<u8>, usize, usize) {
    if factor <= 1 {
        return (rgb.to_vec(), w, h);
    }
    let (ow, oh) = (w * factor, h * factor);
    let mut out = vec![0u8; ow * oh * 3];
    for y in 0..oh {
        for x in 0..ow {
            let src = ((y / factor) * w + x / factor) * 3;
            let dst = (y * ow + x) * 3;
            out[dst..dst + 3].copy_from_slice(&rgb[src..src + 3]);
        }
    }
    (out, ow, oh)
}

/// Mean over the channel axis of a [C, H, W] stack.
pub fn channel_mean(maps: &Tensor) -> Result<Tensor> {
    maps.expect_rank(3, "channel_mean input")?;
    let (c, h, w) = (maps.shape[0], maps.shape[1], maps.shape[2]);
    let hw = h * w;
    let mut out = Tensor::zeros(&[h, w]);
    for k in 0..c {
        for i in 0..hw {
            out.data[i] += maps.data[k * hw + i];
        }
    }
    for v in out.data.iter_mut() {
        *v /= c as f64;
    }
    Ok(out)
}

/// Renders a [H, W] map through the hot ramp and writes it as a PPM, with a
/// text sidecar recording the affine scale so values stay recoverable.
/// A constant map renders at mid-ramp rather than dividing by zero.
pub fn emit_heatmap(path: &Path, map: &Tensor, label: &str, upscale: usize) -> Result<()> {
    map.expect_rank(2, "heatmap input")?;
    let (h, w) = (map.shape[0], map.shape[1]);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &map.data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut rgb = Vec::with_capacity(w * h * 3);
    for &v in &map.data {
        let t = if span == 0.0 { 0.5 } else { (v - lo) / span };
        rgb.extend_from_slice(&hot_rgb(t));
    }
    let (rgb, ow, oh) = upscale_nn(&rgb, w, h, upscale);
    write_ppm(path, ow, oh, &rgb)?;
    let sidecar = format!("source: {label}\nshape: {h}x{w}\nmin: {lo}\nmax: {hi}\n");
    std::fs::write(path.with_extension("txt"), sidecar)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamSource {
    Coarse,
    Medium,
    Fine,
}

impl CamSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(CamSource::Coarse),
            "medium" => Ok(CamSource::Medium),
            "fine" => Ok(CamSource::Fine),
            other => Err(Error::Input(format!("unknown cam source \"{other}\""))),
        }
    }
}

/// Class activation map for one class: gradient of that logit with respect
/// to the chosen tap, channel-averaged into weights, then a ReLU'd weighted
/// channel sum. Output is [H, W] at the tap's resolution, all entries >= 0.
pub fn compute_cam(
    model: &Fmdnn,
    image: &Tensor,
    class: usize,
    source: CamSource,
) -> Result<Tensor> {
    let k = model.cfg().classes;
    if class >= k {
        return Err(Error::Input(format!(
            "class {class} out of range for a {k}-class model"
        )));
    }
    let mut g = Graph::new();
    let out = model.forward(&mut g, image)?;
    let tap: Option<Var> = match source {
        CamSource::Coarse => out.coarse,
        CamSource::Medium => out.medium,
        CamSource::Fine => out.fine,
    };
    let tap = tap.ok_or_else(|| {
        Error::Input(format!(
            "{source:?} branch is not active in this model"
        ))
    })?;
    let picked = g.gather(out.logits, Arc::new(vec![class]), &[1])?;
    let root = g.sum_all(picked);
    let grads = g.backward(root)?;
    let grad = grads
        .get(tap)
        .ok_or_else(|| Error::Input("selected branch got no gradient".into()))?;
    let maps = g.value(tap);
    let (c, h, w) = (maps.shape[0], maps.shape[1], maps.shape[2]);
    let weights = cam_weights(grad, c, h, w)?;
    Ok(cam_from(&weights, maps)?)
}

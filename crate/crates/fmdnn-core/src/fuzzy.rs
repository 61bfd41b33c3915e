//! Fuzzy universal features.
//!
//! Three membership maps over a grayscale image (Gaussian around the
//! per-image mean, sigmoid, trapezoid), fused into one map by a softmax-
//! weighted sum plus a scalar bias, clamped back to [0,1]. The membership
//! maps are plain tensors; only the fusion weights and bias are learnable,
//! so fusion is the only part that runs on the tape.
//!
//! The Gaussian is peak-normalized by default (value 1 at x = mu): the raw
//! density has peak 1/(sigma*sqrt(2pi)), which exceeds 1 for small sigma
//! and would not read as a membership degree. The raw density stays
//! available behind `raw = true`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::num;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MembershipParams {
    pub alpha: f64,
    pub beta: f64,
    pub trap_a: f64,
    pub trap_b: f64,
    pub trap_c: f64,
    pub trap_d: f64,
    pub gaussian_raw: bool,
}

impl Default for MembershipParams {
    fn default() -> Self {
        MembershipParams {
            alpha: 10.0,
            beta: 0.5,
            trap_a: 0.1,
            trap_b: 0.3,
            trap_c: 0.7,
            trap_d: 0.9,
            gaussian_raw: false,
        }
    }
}

impl MembershipParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.trap_a < self.trap_b && self.trap_b <= self.trap_c && self.trap_c < self.trap_d)
        {
            return Err(Error::Parameter(alloc::format!(
                "trapezoid breakpoints need a < b <= c < d, got ({}, {}, {}, {})",
                self.trap_a,
                self.trap_b,
                self.trap_c,
                self.trap_d
            )));
        }
        Ok(())
    }
}

/// The three membership maps of one image plus the stats they came from.
pub struct FuzzyFeature {
    pub i_mu: Tensor,
    pub i_sigma: Tensor,
    pub i_t: Tensor,
    pub image_mu: f64,
    pub image_sigma: f64,
}

/// Luma of an RGB tensor [3,H,W] with channel values in [0,1].
pub fn grayscale(image: &Tensor) -> Result<Tensor> {
    image.expect_rank(3, "grayscale input")?;
    if image.shape[0] != 3 {
        return Err(Error::Dimension(alloc::format!(
            "grayscale: expected 3 channels, got {}",
            image.shape[0]
        )));
    }
    let (h, w) = (image.shape[1], image.shape[2]);
    if h == 0 || w == 0 {
        return Err(Error::Input("grayscale: zero-sized image".into()));
    }
    let plane = h * w;
    let mut data = vec![0.0; plane];
    for i in 0..plane {
        data[i] =
            0.299 * image.data[i] + 0.587 * image.data[plane + i] + 0.114 * image.data[2 * plane + i];
    }
    Tensor::new(&[h, w], data)
}

/// Mean and population standard deviation of a map. A constant image is
/// special-cased to (v, 0) exactly; naive summation would round.
pub fn image_stats(gray: &Tensor) -> Result<(f64, f64)> {
    if gray.is_empty() {
        return Err(Error::Input("image_stats: empty image".into()));
    }
    let first = gray.data[0];
    if gray.data.iter().all(|&x| x == first) {
        return Ok((first, 0.0));
    }
    let n = gray.len() as f64;
    let mu = gray.data.iter().sum::<f64>() / n;
    let var = gray.data.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / n;
    Ok((mu, num::sqrt(var)))
}

/// Gaussian membership around (mu, sigma). Peak-normalized unless `raw`;
/// sigma = 0 degenerates to the indicator of x == mu.
pub fn gaussian_membership(gray: &Tensor, mu: f64, sigma: f64, raw: bool) -> Tensor {
    let data = if sigma == 0.0 {
        gray.data
            .iter()
            .map(|&x| if x == mu { 1.0 } else { 0.0 })
            .collect()
    } else if raw {
        gray.data
            .iter()
            .map(|&x| num::gaussian_pdf(x, mu, sigma))
            .collect()
    } else {
        gray.data
            .iter()
            .map(|&x| {
                let z = (x - mu) / sigma;
                num::exp(-0.5 * z * z)
            })
            .collect()
    };
    Tensor {
        shape: gray.shape.clone(),
        data,
    }
}

pub fn sigmoid_membership(gray: &Tensor, alpha: f64, beta: f64) -> Tensor {
    let data = gray
        .data
        .iter()
        .map(|&x| 1.0 / (1.0 + num::exp(-alpha * (x - beta))))
        .collect();
    Tensor {
        shape: gray.shape.clone(),
        data,
    }
}

/// Case-by-case trapezoid: 0 for x <= a, ramp on (a,b], 1 on (b,c],
/// descent on (c,d), 0 for x >= d.
pub fn trapezoid_membership(gray: &Tensor, a: f64, b: f64, c: f64, d: f64) -> Result<Tensor> {
    if !(a < b && b <= c && c < d) {
        return Err(Error::Parameter(alloc::format!(
            "trapezoid breakpoints need a < b <= c < d, got ({a}, {b}, {c}, {d})"
        )));
    }
    let data = gray
        .data
        .iter()
        .map(|&x| {
            if x <= a {
                0.0
            } else if x <= b {
                (x - a) / (b - a)
            } else if x <= c {
                1.0
            } else if x < d {
                (d - x) / (d - c)
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor {
        shape: gray.shape.clone(),
        data,
    })
}

/// All three maps of one image, with per-image Gaussian stats.
pub fn fuzzy_features(gray: &Tensor, p: &MembershipParams) -> Result<FuzzyFeature> {
    p.validate()?;
    let (mu, sigma) = image_stats(gray)?;
    Ok(FuzzyFeature {
        i_mu: gaussian_membership(gray, mu, sigma, p.gaussian_raw),
        i_sigma: sigmoid_membership(gray, p.alpha, p.beta),
        i_t: trapezoid_membership(gray, p.trap_a, p.trap_b, p.trap_c, p.trap_d)?,
        image_mu: mu,
        image_sigma: sigma,
    })
}

/// Softmax of three logits, the off-tape mirror of the learnable weights.
pub fn softmax3(logits: [f64; 3]) -> [f64; 3] {
    let m = logits[0].max(logits[1]).max(logits[2]);
    let e = [
        num::exp(logits[0] - m),
        num::exp(logits[1] - m),
        num::exp(logits[2] - m),
    ];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

/// Plain fusion: z = w0*I_mu + w1*I_sigma + w2*I_T + bias, clamped to [0,1].
pub fn fuse_plain(f: &FuzzyFeature, weights: [f64; 3], bias: f64) -> Result<Tensor> {
    if f.i_mu.shape != f.i_sigma.shape || f.i_mu.shape != f.i_t.shape {
        return Err(Error::Dimension(alloc::format!(
            "fuse: map shapes {:?} / {:?} / {:?}",
            f.i_mu.shape,
            f.i_sigma.shape,
            f.i_t.shape
        )));
    }
    let data = (0..f.i_mu.len())
        .map(|i| {
            let z = weights[0] * f.i_mu.data[i]
                + weights[1] * f.i_sigma.data[i]
                + weights[2] * f.i_t.data[i]
                + bias;
            z.clamp(0.0, 1.0)
        })
        .collect();
    Ok(Tensor {
        shape: f.i_mu.shape.clone(),
        data,
    })
}

/// Fusion on the tape so gradients reach the weight logits and bias.
/// `maps` are constant leaves; the weights are the 3-way softmax of
/// `w_logits`, so they sum to 1 by construction.
pub fn fuse_on_graph(
    g: &mut Graph,
    maps: [Var; 3],
    w_logits: Var,
    bias: Var,
) -> Result<Var> {
    if g.value(w_logits).shape != [3] {
        return Err(Error::Dimension(alloc::format!(
            "fuse: weight logits must be [3], got {:?}",
            g.value(w_logits).shape
        )));
    }
    let w = g.softmax(w_logits)?;
    let mut acc: Option<Var> = None;
    for (i, &m) in maps.iter().enumerate() {
        let wi = g.gather(w, Arc::new(vec![i]), &[1])?;
        let term = g.scale_scalar(m, wi)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let shifted = g.add_scalar(acc.unwrap(), bias)?;
    Ok(g.clamp01(shifted))
}

/// Flat indices that cut a [C,H,W] map (C may be 1 for a rank-2 map) into
/// row-major patch tokens. Token n covers patch cell (n / (W/P), n % (W/P));
/// within a token the layout is channel-major, then patch row, then column.
pub fn patch_indices(c: usize, h: usize, w: usize, p: usize) -> Result<Arc<Vec<usize>>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Dimension(alloc::format!(
            "patch size {p} does not divide {h}x{w}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(gh * gw * c * p * p);
    for gy in 0..gh {
        for gx in 0..gw {
            for ci in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        idx.push((ci * h + gy * p + py) * w + gx * p + px);
                    }
                }
            }
        }
    }
    Ok(Arc::new(idx))
}

/// Inverse of the patch cut (identity projection), for reconstruction
/// checks and round-trip tests.
pub fn unpatch(tokens: &Tensor, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
    let indices = patch_indices(c, h, w, p)?;
    if tokens.len() != indices.len() {
        return Err(Error::Dimension(alloc::format!(
            "unpatch: {} token values vs {} map cells",
            tokens.len(),
            indices.len()
        )));
    }
    let mut data = vec![0.0; c * h * w];
    for (o, &i) in indices.iter().enumerate() {
        data[i] = tokens.data[o];
    }
    let shape: Vec<usize> = if c == 1 { vec![h, w] } else { vec![c, h, w] };
    Tensor::new(&shape, data)
}

/// Fuzzy patch tokens: the fused map cut into N = (H/P)^2 patches, each
/// linearly projected to D, plus learned positions. No class token.
pub fn fuzzy_patch_embed(
    g: &mut Graph,
    fused: Var,
    p: usize,
    projection: Var,
    pos: Var,
) -> Result<Var> {
    let (h, w) = {
        let t = g.value(fused);
        t.expect_rank(2, "fuzzy_patch_embed map")?;
        (t.shape[0], t.shape[1])
    };
    let indices = patch_indices(1, h, w, p)?;
    let n = (h / p) * (w / p);
    let tokens = g.gather(fused, indices, &[n, p * p])?;
    let projected = g.matmul(tokens, projection)?;
    g.add(projected, pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(vals: &[f64]) -> Tensor {
        Tensor::new(&[1, vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn luma_of_primaries() {
        let img = Tensor::new(
            &[3, 1, 3],
            // pixels: white, black, red
            vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        let gy = grayscale(&img).unwrap();
        assert!((gy.data[0] - 1.0).abs() < 1e-15); // 0.299+0.587+0.114 in f64
        assert_eq!(gy.data[1], 0.0);
        assert_eq!(gy.data[2], 0.299);
    }

    #[test]
    fn stats_hand_cases() {
        let (mu, sigma) = image_stats(&gray(&[0.7, 0.7, 0.7])).unwrap();
        assert_eq!((mu, sigma), (0.7, 0.0));

        let (mu, sigma) = image_stats(&gray(&[0.0, 1.0])).unwrap();
        assert!((mu - 0.5).abs() < 1e-15);
        assert!((sigma - 0.5).abs() < 1e-15);

        let (mu, sigma) = image_stats(&gray(&[0.2, 0.4, 0.6])).unwrap();
        assert!((mu - 0.4).abs() < 1e-12);
        assert!((sigma - 0.16329931618554522).abs() < 1e-12);
    }

    #[test]
    fn gaussian_peak_and_shoulder() {
        let g = gray(&[0.5, 0.3, 0.7]);
        let m = gaussian_membership(&g, 0.5, 0.2, false);
        assert_eq!(m.data[0], 1.0);
        // x = mu - sigma and mu + sigma
        let e = num::exp(-0.5);
        assert!((m.data[1] - e).abs() < 1e-12);
        assert!((m.data[2] - e).abs() < 1e-12);
    }

    #[test]
    fn gaussian_raw_exceeds_one_at_small_sigma() {
        let g = gray(&[0.5]);
        let m = gaussian_membership(&g, 0.5, 0.2, true);
        assert!((m.data[0] - 1.9947114020071635).abs() < 1e-12);
    }

    #[test]
    fn gaussian_degenerate_sigma_is_indicator() {
        let g = gray(&[0.4, 0.4, 0.9]);
        let m = gaussian_membership(&g, 0.4, 0.0, false);
        assert_eq!(m.data, alloc::vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn sigmoid_center_and_quartile() {
        let alpha = 10.0;
        let beta = 0.5;
        let g = gray(&[beta, beta + num::ln(3.0) / alpha]);
        let m = sigmoid_membership(&g, alpha, beta);
        assert!((m.data[0] - 0.5).abs() < 1e-15);
        assert!((m.data[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_flat_when_alpha_zero() {
        let m = sigmoid_membership(&gray(&[0.0, 0.3, 1.0]), 0.0, 0.5);
        assert!(m.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn trapezoid_cases() {
        let (a, b, c, d) = (0.1, 0.3, 0.7, 0.9);
        let g = gray(&[0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.8, 0.9, 0.95]);
        let m = trapezoid_membership(&g, a, b, c, d).unwrap();
        assert_eq!(m.data[0], 0.0); // x < a
        assert_eq!(m.data[1], 0.0); // x == a
        assert!((m.data[2] - 0.5).abs() < 1e-12); // ramp midpoint
        assert_eq!(m.data[3], 1.0); // x == b takes the ramp endpoint
        assert_eq!(m.data[4], 1.0);
        assert_eq!(m.data[5], 1.0); // x == c still 1
        assert!((m.data[6] - 0.5).abs() < 1e-12);
        assert_eq!(m.data[7], 0.0); // x == d
        assert_eq!(m.data[8], 0.0);
    }

    #[test]
    fn trapezoid_rejects_bad_order() {
        let g = gray(&[0.5]);
        assert!(trapezoid_membership(&g, 0.3, 0.3, 0.7, 0.9).is_err());
        assert!(trapezoid_membership(&g, 0.1, 0.8, 0.7, 0.9).is_err());
        assert!(trapezoid_membership(&g, 0.1, 0.3, 0.9, 0.9).is_err());
    }

    #[test]
    fn fuse_hand_case() {
        let f = FuzzyFeature {
            i_mu: gray(&[0.2]),
            i_sigma: gray(&[0.4]),
            i_t: gray(&[0.6]),
            image_mu: 0.0,
            image_sigma: 1.0,
        };
        let z = fuse_plain(&f, [0.5, 0.3, 0.2], 0.05).unwrap();
        assert!((z.data[0] - 0.39).abs() < 1e-12);
    }

    #[test]
    fn fuse_projection_and_convexity() {
        let f = FuzzyFeature {
            i_mu: gray(&[0.3, 0.8]),
            i_sigma: gray(&[0.5, 0.1]),
            i_t: gray(&[0.9, 0.4]),
            image_mu: 0.0,
            image_sigma: 1.0,
        };
        let z = fuse_plain(&f, [1.0, 0.0, 0.0], 0.0).unwrap();
        assert_eq!(z.data, f.i_mu.data);

        let f2 = FuzzyFeature {
            i_mu: gray(&[0.6]),
            i_sigma: gray(&[0.6]),
            i_t: gray(&[0.6]),
            image_mu: 0.0,
            image_sigma: 1.0,
        };
        let third = 1.0 / 3.0;
        let z = fuse_plain(&f2, [third, third, third], 0.0).unwrap();
        assert!((z.data[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn fuse_on_graph_matches_plain() {
        let mut g = Graph::new();
        let maps = [
            g.leaf(gray(&[0.2, 0.9])),
            g.leaf(gray(&[0.5, 0.1])),
            g.leaf(gray(&[0.7, 0.3])),
        ];
        let logits = g.leaf(Tensor::new(&[3], alloc::vec![0.3, -0.2, 1.1]).unwrap());
        let bias = g.leaf(Tensor::scalar(0.02));
        let z = fuse_on_graph(&mut g, maps, logits, bias).unwrap();

        let w = softmax3([0.3, -0.2, 1.1]);
        let f = FuzzyFeature {
            i_mu: gray(&[0.2, 0.9]),
            i_sigma: gray(&[0.5, 0.1]),
            i_t: gray(&[0.7, 0.3]),
            image_mu: 0.0,
            image_sigma: 1.0,
        };
        let plain = fuse_plain(&f, w, 0.02).unwrap();
        for (a, b) in g.value(z).data.iter().zip(&plain.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax3_sums_to_one() {
        let w = softmax3([2.0, -1.0, 0.3]);
        assert!((w[0] + w[1] + w[2] - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn patch_round_trip_is_exact() {
        let mut rng = crate::rng::Rng::seed_from_u64(9);
        let map = Tensor::new(
            &[8, 8],
            (0..64).map(|_| rng.uniform()).collect(),
        )
        .unwrap();
        let idx = patch_indices(1, 8, 8, 4).unwrap();
        let tokens = Tensor::new(
            &[4, 16],
            idx.iter().map(|&i| map.data[i]).collect(),
        )
        .unwrap();
        let back = unpatch(&tokens, 1, 8, 8, 4).unwrap();
        assert_eq!(back.data, map.data);
    }

    #[test]
    fn fuzzy_embed_identity_projection_reconstructs() {
        // D = P^2, identity projection, zero positions: tokens are the raw
        // patches, so unpatching restores the map bit for bit.
        let mut rng = crate::rng::Rng::seed_from_u64(10);
        let mut g = Graph::new();
        let map = Tensor::new(&[8, 8], (0..64).map(|_| rng.uniform()).collect()).unwrap();
        let fused = g.leaf(map.clone());
        let p = 4;
        let d = p * p;
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data[i * d + i] = 1.0;
        }
        let proj = g.leaf(eye);
        let pos = g.leaf(Tensor::zeros(&[4, d]));
        let tokens = fuzzy_patch_embed(&mut g, fused, p, proj, pos).unwrap();
        let back = unpatch(g.value(tokens), 1, 8, 8, p).unwrap();
        assert_eq!(back.data, map.data);
    }

    #[test]
    fn fuzzy_embed_shapes() {
        let mut g = Graph::new();
        let fused = g.leaf(Tensor::zeros(&[64, 64]));
        let proj = g.leaf(Tensor::zeros(&[64, 32]));
        let pos = g.leaf(Tensor::zeros(&[64, 32]));
        let tokens = fuzzy_patch_embed(&mut g, fused, 8, proj, pos).unwrap();
        assert_eq!(g.value(tokens).shape, alloc::vec![64, 32]);
    }
}

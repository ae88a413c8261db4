//! Residual U-Net refinement of the rendered ray-drop mask.
//!
//! The refiner takes the full rendered return-probability, depth (normalized
//! by max range) and intensity images, and produces refined return
//! probabilities. The network output is a residual in logit space on top of
//! the rendered probability, so the zero-initialized final convolution makes
//! the refiner start as the identity.

use crate::error::{Error, Result};
use crate::img::Image;
use crate::model::RenderedScan;
use crate::nn::{Gradients, ParamGroup, ParamStore, TensorRef};
use crate::sensor::RangeScan;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Default binarization threshold for the refined mask.
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;
const LOGIT_CLAMP: f64 = 1e-6;
const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    /// Encoder channel widths, coarsest scale last.
    pub channels: [usize; 4],
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128, 256],
        }
    }
}

/// Channel-major feature map.
#[derive(Debug, Clone)]
struct Feat {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Feat {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    fn plane(&self, ch: usize) -> &[f64] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }

    #[inline]
    fn plane_mut(&mut self, ch: usize) -> &mut [f64] {
        let hw = self.h * self.w;
        &mut self.data[ch * hw..(ch + 1) * hw]
    }

    fn relu(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.max(0.0));
    }
}

#[derive(Debug, Clone)]
struct Conv2d {
    weight: TensorRef,
    bias: TensorRef,
    in_ch: usize,
    out_ch: usize,
    ksize: usize,
}

impl Conv2d {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.alloc(
            &format!("{name}.weight"),
            &[out_ch, in_ch, ksize, ksize],
            ParamGroup::Mlp,
        );
        let bias = store.alloc(&format!("{name}.bias"), &[out_ch], ParamGroup::Mlp);
        let bound = 1.0 / ((in_ch * ksize * ksize) as f64).sqrt();
        store.fill_with(weight, || rng.gen_range(-bound..bound));
        store.fill_with(bias, || rng.gen_range(-bound..bound));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            ksize,
        }
    }

    fn zero_init(&self, store: &mut ParamStore) {
        store.slice_mut(self.weight).iter_mut().for_each(|v| *v = 0.0);
        store.slice_mut(self.bias).iter_mut().for_each(|v| *v = 0.0);
    }

    fn forward(&self, store: &ParamStore, x: &Feat) -> Feat {
        debug_assert_eq!(x.c, self.in_ch);
        let (h, w) = (x.h, x.w);
        let k = self.ksize;
        let pad = k / 2;
        let weight = store.slice(self.weight);
        let bias = store.slice(self.bias);
        let mut y = Feat::zeros(self.out_ch, h, w);
        let hw = h * w;
        y.data
            .par_chunks_mut(hw)
            .enumerate()
            .for_each(|(oc, out_plane)| {
                out_plane.iter_mut().for_each(|v| *v = bias[oc]);
                for ic in 0..self.in_ch {
                    let xp = x.plane(ic);
                    let wbase = ((oc * self.in_ch) + ic) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = weight[wbase + ky * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let dy = ky as isize - pad as isize;
                            let dx = kx as isize - pad as isize;
                            for oy in 0..h {
                                let iy = oy as isize + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row_in = iy as usize * w;
                                let row_out = oy * w;
                                let x_lo = (-dx).max(0) as usize;
                                let x_hi = (w as isize - dx.max(0)) as usize;
                                for ox in x_lo..x_hi {
                                    out_plane[row_out + ox] +=
                                        wv * xp[row_in + (ox as isize + dx) as usize];
                                }
                            }
                        }
                    }
                }
            });
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    fn backward(&self, store: &ParamStore, x: &Feat, grad_y: &Feat, grads: &mut Gradients) -> Feat {
        let (h, w) = (x.h, x.w);
        let k = self.ksize;
        let pad = k / 2;
        let weight = store.slice(self.weight);
        {
            let gw = grads.slice_mut(self.weight);
            gw.par_chunks_mut(self.in_ch * k * k)
                .enumerate()
                .for_each(|(oc, gw_oc)| {
                    let gy = grad_y.plane(oc);
                    for ic in 0..self.in_ch {
                        let xp = x.plane(ic);
                        for ky in 0..k {
                            for kx in 0..k {
                                let dy = ky as isize - pad as isize;
                                let dx = kx as isize - pad as isize;
                                let mut acc = 0.0;
                                for oy in 0..h {
                                    let iy = oy as isize + dy;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let row_in = iy as usize * w;
                                    let row_out = oy * w;
                                    let x_lo = (-dx).max(0) as usize;
                                    let x_hi = (w as isize - dx.max(0)) as usize;
                                    for ox in x_lo..x_hi {
                                        acc += gy[row_out + ox]
                                            * xp[row_in + (ox as isize + dx) as usize];
                                    }
                                }
                                gw_oc[ic * k * k + ky * k + kx] += acc;
                            }
                        }
                    }
                });
        }
        {
            let gb = grads.slice_mut(self.bias);
            for oc in 0..self.out_ch {
                gb[oc] += grad_y.plane(oc).iter().sum::<f64>();
            }
        }
        let mut grad_x = Feat::zeros(self.in_ch, h, w);
        let hw = h * w;
        grad_x
            .data
            .par_chunks_mut(hw)
            .enumerate()
            .for_each(|(ic, gx_plane)| {
                for oc in 0..self.out_ch {
                    let gy = grad_y.plane(oc);
                    let wbase = ((oc * self.in_ch) + ic) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = weight[wbase + ky * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let dy = ky as isize - pad as isize;
                            let dx = kx as isize - pad as isize;
                            for oy in 0..h {
                                let iy = oy as isize + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row_in = iy as usize * w;
                                let row_out = oy * w;
                                let x_lo = (-dx).max(0) as usize;
                                let x_hi = (w as isize - dx.max(0)) as usize;
                                for ox in x_lo..x_hi {
                                    gx_plane[row_in + (ox as isize + dx) as usize] +=
                                        wv * gy[row_out + ox];
                                }
                            }
                        }
                    }
                }
            });
        grad_x
    }
}

fn avg_pool2(x: &Feat) -> Feat {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut y = Feat::zeros(x.c, h, w);
    for c in 0..x.c {
        let xp = x.plane(c);
        let yp = y.plane_mut(c);
        for oy in 0..h {
            for ox in 0..w {
                let base = 2 * oy * x.w + 2 * ox;
                yp[oy * w + ox] =
                    0.25 * (xp[base] + xp[base + 1] + xp[base + x.w] + xp[base + x.w + 1]);
            }
        }
    }
    y
}

fn avg_pool2_backward(grad_y: &Feat, in_h: usize, in_w: usize) -> Feat {
    let mut gx = Feat::zeros(grad_y.c, in_h, in_w);
    for c in 0..grad_y.c {
        let gyp = grad_y.plane(c);
        let gxp = gx.plane_mut(c);
        for oy in 0..grad_y.h {
            for ox in 0..grad_y.w {
                let g = 0.25 * gyp[oy * grad_y.w + ox];
                let base = 2 * oy * in_w + 2 * ox;
                gxp[base] += g;
                gxp[base + 1] += g;
                gxp[base + in_w] += g;
                gxp[base + in_w + 1] += g;
            }
        }
    }
    gx
}

/// Bilinear resize source coordinates for output index `dst`.
#[inline]
fn resize_coord(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let pos = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
    let pos = pos.clamp(0.0, (src_len - 1) as f64);
    let i0 = pos as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, pos - i0 as f64)
}

fn upsample_to(x: &Feat, th: usize, tw: usize) -> Feat {
    let mut y = Feat::zeros(x.c, th, tw);
    for c in 0..x.c {
        let xp = x.plane(c);
        let yp = y.plane_mut(c);
        for oy in 0..th {
            let (y0, y1, fy) = resize_coord(oy, th, x.h);
            for ox in 0..tw {
                let (x0, x1, fx) = resize_coord(ox, tw, x.w);
                yp[oy * tw + ox] = (1.0 - fy)
                    * ((1.0 - fx) * xp[y0 * x.w + x0] + fx * xp[y0 * x.w + x1])
                    + fy * ((1.0 - fx) * xp[y1 * x.w + x0] + fx * xp[y1 * x.w + x1]);
            }
        }
    }
    y
}

fn upsample_to_backward(grad_y: &Feat, sh: usize, sw: usize) -> Feat {
    let mut gx = Feat::zeros(grad_y.c, sh, sw);
    for c in 0..grad_y.c {
        let gyp = grad_y.plane(c);
        let gxp = gx.plane_mut(c);
        for oy in 0..grad_y.h {
            let (y0, y1, fy) = resize_coord(oy, grad_y.h, sh);
            for ox in 0..grad_y.w {
                let (x0, x1, fx) = resize_coord(ox, grad_y.w, sw);
                let g = gyp[oy * grad_y.w + ox];
                gxp[y0 * sw + x0] += g * (1.0 - fy) * (1.0 - fx);
                gxp[y0 * sw + x1] += g * (1.0 - fy) * fx;
                gxp[y1 * sw + x0] += g * fy * (1.0 - fx);
                gxp[y1 * sw + x1] += g * fy * fx;
            }
        }
    }
    gx
}

fn concat(a: &Feat, b: &Feat) -> Feat {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut y = Feat::zeros(a.c + b.c, a.h, a.w);
    y.data[..a.data.len()].copy_from_slice(&a.data);
    y.data[a.data.len()..].copy_from_slice(&b.data);
    y
}

/// Two 3x3 convolutions with ReLU after each.
#[derive(Debug, Clone)]
struct ConvBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

struct BlockCache {
    input: Feat,
    a1: Feat,
    a2: Feat,
}

impl ConvBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, rng),
        }
    }

    fn forward(&self, store: &ParamStore, x: Feat) -> (Feat, BlockCache) {
        let mut a1 = self.conv1.forward(store, &x);
        a1.relu();
        let mut a2 = self.conv2.forward(store, &a1);
        a2.relu();
        (
            a2.clone(),
            BlockCache { input: x, a1, a2 },
        )
    }

    fn backward(
        &self,
        store: &ParamStore,
        cache: &BlockCache,
        mut grad: Feat,
        grads: &mut Gradients,
    ) -> Feat {
        for (g, a) in grad.data.iter_mut().zip(cache.a2.data.iter()) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        let mut grad = self.conv2.backward(store, &cache.a1, &grad, grads);
        for (g, a) in grad.data.iter_mut().zip(cache.a1.data.iter()) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        self.conv1.backward(store, &cache.input, &grad, grads)
    }
}

/// Encoder-decoder refiner over range-view images: 4 scales, two
/// convolutions per scale, bilinear upsampling, skip connections, and a
/// zero-initialized 1x1 output convolution feeding the logit-space residual.
#[derive(Debug, Clone)]
pub struct RefinerNet {
    pub config: RefinerConfig,
    enc: Vec<ConvBlock>,
    dec: Vec<ConvBlock>,
    out_conv: Conv2d,
}

pub struct RefinerCache {
    enc: Vec<BlockCache>,
    dec: Vec<BlockCache>,
    dec_cat_split: Vec<usize>,
    final_in: Feat,
    prob: Vec<f64>,
}

impl RefinerCache {
    /// Refined probabilities of the cached forward pass, row-major.
    pub fn prob_values(&self) -> &[f64] {
        &self.prob
    }
}

impl RefinerNet {
    pub fn new(store: &mut ParamStore, config: RefinerConfig, rng: &mut impl Rng) -> Self {
        let c = config.channels;
        let enc = vec![
            ConvBlock::new(store, "unet.enc0", 3, c[0], rng),
            ConvBlock::new(store, "unet.enc1", c[0], c[1], rng),
            ConvBlock::new(store, "unet.enc2", c[1], c[2], rng),
            ConvBlock::new(store, "unet.enc3", c[2], c[3], rng),
        ];
        let dec = vec![
            ConvBlock::new(store, "unet.dec2", c[3] + c[2], c[2], rng),
            ConvBlock::new(store, "unet.dec1", c[2] + c[1], c[1], rng),
            ConvBlock::new(store, "unet.dec0", c[1] + c[0], c[0], rng),
        ];
        let out_conv = Conv2d::new(store, "unet.out", c[0], 1, 1, rng);
        out_conv.zero_init(store);
        Self {
            config,
            enc,
            dec,
            out_conv,
        }
    }

    fn stack_inputs(raydrop: &Image, depth: &Image, intensity: &Image) -> Feat {
        let (h, w) = (raydrop.height(), raydrop.width());
        let mut x = Feat::zeros(3, h, w);
        x.plane_mut(0).copy_from_slice(raydrop.data());
        x.plane_mut(1).copy_from_slice(depth.data());
        x.plane_mut(2).copy_from_slice(intensity.data());
        x
    }

    /// Forward pass returning refined probabilities and the cache needed
    /// for a training step.
    pub fn forward(
        &self,
        store: &ParamStore,
        raydrop: &Image,
        depth_norm: &Image,
        intensity: &Image,
    ) -> Result<(Image, RefinerCache)> {
        if !raydrop.same_dims(depth_norm) || !raydrop.same_dims(intensity) {
            return Err(Error::invalid("refiner inputs must share dimensions"));
        }
        let (h, w) = (raydrop.height(), raydrop.width());
        if h < 8 || w < 8 {
            return Err(Error::invalid("refiner needs at least 8x8 images"));
        }
        let x = Self::stack_inputs(raydrop, depth_norm, intensity);

        let mut enc_caches = Vec::with_capacity(4);
        let mut skips: Vec<Feat> = Vec::with_capacity(3);
        let mut cur = x;
        for (i, block) in self.enc.iter().enumerate() {
            let (out, cache) = block.forward(store, cur);
            enc_caches.push(cache);
            if i < 3 {
                cur = avg_pool2(&out);
                skips.push(out);
            } else {
                cur = out;
            }
        }

        let mut dec_caches = Vec::with_capacity(3);
        let mut dec_cat_split = Vec::with_capacity(3);
        for (i, block) in self.dec.iter().enumerate() {
            let skip = &skips[2 - i];
            let up = upsample_to(&cur, skip.h, skip.w);
            dec_cat_split.push(up.c);
            let cat = concat(&up, skip);
            let (out, cache) = block.forward(store, cat);
            dec_caches.push(cache);
            cur = out;
        }

        let final_in = cur;
        let net_out = self.out_conv.forward(store, &final_in);
        let mut logits = net_out.data;
        for (l, p) in logits.iter_mut().zip(raydrop.data()) {
            let p = p.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
            *l += (p / (1.0 - p)).ln();
        }
        let prob: Vec<f64> = logits.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect();
        let image = Image::from_vec(h, w, prob.clone())?;
        Ok((
            image,
            RefinerCache {
                enc: enc_caches,
                dec: dec_caches,
                dec_cat_split,
                final_in,
                prob,
            },
        ))
    }

    /// Refined probability image (inference only).
    pub fn refine_mask(
        &self,
        store: &ParamStore,
        raydrop: &Image,
        depth_norm: &Image,
        intensity: &Image,
    ) -> Result<Image> {
        Ok(self.forward(store, raydrop, depth_norm, intensity)?.0)
    }

    /// One BCE training pass over a cached forward: returns the loss and
    /// accumulates parameter gradients.
    pub fn backward_bce(
        &self,
        store: &ParamStore,
        cache: &RefinerCache,
        gt_mask: &Image,
        grads: &mut Gradients,
    ) -> f64 {
        let n = cache.prob.len() as f64;
        let loss = bce_mean(&cache.prob, gt_mask.data());
        let (h, w) = (gt_mask.height(), gt_mask.width());
        // d(BCE)/d(logit) = (p - m) / n.
        let mut grad = Feat::zeros(1, h, w);
        for (i, g) in grad.data.iter_mut().enumerate() {
            *g = (cache.prob[i] - gt_mask.data()[i]) / n;
        }
        let mut gcur = self.out_conv.backward(store, &cache.final_in, &grad, grads);
        // Decoder, shallowest applied last so walked first.
        let mut skip_grads: Vec<Option<Feat>> = vec![None, None, None];
        for i in (0..3).rev() {
            let gcat = self.dec[i].backward(store, &cache.dec[i], gcur, grads);
            let split = cache.dec_cat_split[i];
            let hw = gcat.h * gcat.w;
            let up_grad = Feat {
                c: split,
                h: gcat.h,
                w: gcat.w,
                data: gcat.data[..split * hw].to_vec(),
            };
            skip_grads[2 - i] = Some(Feat {
                c: gcat.c - split,
                h: gcat.h,
                w: gcat.w,
                data: gcat.data[split * hw..].to_vec(),
            });
            let (sh, sw) = if i == 0 {
                (cache.enc[3].a2.h, cache.enc[3].a2.w)
            } else {
                (cache.dec[i - 1].a2.h, cache.dec[i - 1].a2.w)
            };
            gcur = upsample_to_backward(&up_grad, sh, sw);
        }
        // Encoder, deepest first; pooled gradients merge with skip paths.
        let mut g = self.enc[3].backward(store, &cache.enc[3], gcur, grads);
        for l in (0..3).rev() {
            let (eh, ew) = (cache.enc[l].a2.h, cache.enc[l].a2.w);
            let mut ge = avg_pool2_backward(&g, eh, ew);
            if let Some(sg) = &skip_grads[l] {
                for (a, b) in ge.data.iter_mut().zip(&sg.data) {
                    *a += b;
                }
            }
            g = self.enc[l].backward(store, &cache.enc[l], ge, grads);
        }
        loss
    }
}

/// Mean binary cross-entropy with probability clamping.
pub fn refine_loss(pred_prob: &Image, gt_mask: &Image) -> Result<f64> {
    if !pred_prob.same_dims(gt_mask) {
        return Err(Error::invalid("refine_loss images must share dimensions"));
    }
    Ok(bce_mean(pred_prob.data(), gt_mask.data()))
}

fn bce_mean(prob: &[f64], mask: &[f64]) -> f64 {
    let mut total = 0.0;
    for (p, m) in prob.iter().zip(mask) {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total -= m * p.ln() + (1.0 - m) * (1.0 - p).ln();
    }
    total / prob.len() as f64
}

/// Thresholds the refined probabilities (`prob >= tau` kept) and zeroes the
/// dropped pixels of the rendered depth and intensity.
pub fn apply_mask(rendered: &RenderedScan, prob: &Image, tau: f64, timestamp: f64) -> RangeScan {
    let mask = prob.map(|p| if p >= tau { 1.0 } else { 0.0 });
    RangeScan {
        depth: rendered.depth_m.masked_by(&mask),
        intensity: rendered.intensity.masked_by(&mask),
        mask,
        pose: rendered.pose.clone(),
        timestamp,
    }
}

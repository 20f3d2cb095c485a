use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    depthwise_conv, depthwise_conv_backward, gln_backward, gln_forward, linear, linear_backward, prelu,
    prelu_backward, sigmoid, GlnCache, ParamSet, Tensor,
};
use crate::scalar::Scalar;
use crate::seed::rng_for;
use crate::signal::AudioClip;

/// Time-domain masking separator with a learned filterbank and a stack of
/// dilated depthwise-separable convolution blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparatorConfig {
    /// Encoder filters (N).
    pub num_filters: usize,
    /// Encoder kernel length in samples (L); the stride is `L / 2`.
    pub kernel_len: usize,
    /// Bottleneck channels (B).
    pub bottleneck: usize,
    /// Channels inside each block (H).
    pub hidden: usize,
    /// Skip-connection channels (Sc).
    pub skip: usize,
    /// Depthwise kernel size (P).
    pub conv_kernel: usize,
    /// Blocks per repeat (X); dilations run 1, 2, ..., 2^(X-1).
    pub blocks: usize,
    /// Repeats (R).
    pub repeats: usize,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        SeparatorConfig {
            num_filters: 128,
            kernel_len: 40,
            bottleneck: 128,
            hidden: 256,
            skip: 128,
            conv_kernel: 3,
            blocks: 7,
            repeats: 2,
        }
    }
}

impl SeparatorConfig {
    pub fn stride(&self) -> usize {
        self.kernel_len / 2
    }

    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.num_filters == 0
            || c.kernel_len < 2
            || c.kernel_len % 2 != 0
            || c.bottleneck == 0
            || c.hidden == 0
            || c.skip == 0
            || c.conv_kernel % 2 == 0
            || c.blocks == 0
            || c.repeats == 0
        {
            return Err(Error::Config(format!("invalid separator {self:?}")));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let c = self;
        let block = (c.bottleneck * c.hidden + c.hidden)
            + 1
            + 2 * c.hidden
            + (c.hidden * c.conv_kernel + c.hidden)
            + 1
            + 2 * c.hidden
            + (c.hidden * c.bottleneck + c.bottleneck)
            + (c.hidden * c.skip + c.skip);
        c.num_filters * c.kernel_len
            + 2 * c.num_filters
            + (c.num_filters * c.bottleneck + c.bottleneck)
            + c.blocks * c.repeats * block
            + 1
            + (c.skip * c.num_filters + c.num_filters)
            + c.num_filters * c.kernel_len
    }
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    in_w: usize,
    in_b: usize,
    prelu1: usize,
    norm1_g: usize,
    norm1_b: usize,
    dw_w: usize,
    dw_b: usize,
    prelu2: usize,
    norm2_g: usize,
    norm2_b: usize,
    res_w: usize,
    res_b: usize,
    skip_w: usize,
    skip_b: usize,
    dilation: usize,
}

#[derive(Clone)]
pub struct Separator<T: Scalar> {
    config: SeparatorConfig,
    params: ParamSet<T>,
    enc_w: usize,
    enc_norm_g: usize,
    enc_norm_b: usize,
    bn_w: usize,
    bn_b: usize,
    blocks: Vec<BlockIdx>,
    out_prelu: usize,
    mask_w: usize,
    mask_b: usize,
    dec_w: usize,
}

struct BlockCache<T> {
    z_in: Vec<T>,
    u1: Vec<T>,
    norm1: GlnCache<T>,
    n1: Vec<T>,
    u2: Vec<T>,
    norm2: GlnCache<T>,
    n2: Vec<T>,
}

pub struct SeparatorCache<T> {
    len: usize,
    frames: usize,
    windows: Vec<T>,
    encoded: Vec<T>,
    enc_norm: GlnCache<T>,
    normalized: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    skip_sum: Vec<T>,
    mask_in: Vec<T>,
    mask: Vec<T>,
    masked: Vec<T>,
}

impl<T: Scalar> Separator<T> {
    fn build(config: SeparatorConfig, mut init: impl FnMut(&str, &[usize]) -> Tensor<T>) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut params = ParamSet::default();
        let mut add = |name: String, shape: &[usize]| {
            let t = init(&name, shape);
            params.push(name, t)
        };
        let enc_w = add("encoder.weight".into(), &[c.num_filters, c.kernel_len]);
        let enc_norm_g = add("encoder_norm.gamma".into(), &[c.num_filters]);
        let enc_norm_b = add("encoder_norm.beta".into(), &[c.num_filters]);
        let bn_w = add("bottleneck.weight".into(), &[c.bottleneck, c.num_filters]);
        let bn_b = add("bottleneck.bias".into(), &[c.bottleneck]);
        let mut blocks = Vec::new();
        for r in 0..c.repeats {
            for x in 0..c.blocks {
                let i = r * c.blocks + x;
                let p = |s: &str| format!("blocks.{i}.{s}");
                blocks.push(BlockIdx {
                    in_w: add(p("conv1x1.weight"), &[c.hidden, c.bottleneck]),
                    in_b: add(p("conv1x1.bias"), &[c.hidden]),
                    prelu1: add(p("prelu1.alpha"), &[1]),
                    norm1_g: add(p("norm1.gamma"), &[c.hidden]),
                    norm1_b: add(p("norm1.beta"), &[c.hidden]),
                    dw_w: add(p("depthwise.weight"), &[c.hidden, c.conv_kernel]),
                    dw_b: add(p("depthwise.bias"), &[c.hidden]),
                    prelu2: add(p("prelu2.alpha"), &[1]),
                    norm2_g: add(p("norm2.gamma"), &[c.hidden]),
                    norm2_b: add(p("norm2.beta"), &[c.hidden]),
                    res_w: add(p("residual.weight"), &[c.bottleneck, c.hidden]),
                    res_b: add(p("residual.bias"), &[c.bottleneck]),
                    skip_w: add(p("skip.weight"), &[c.skip, c.hidden]),
                    skip_b: add(p("skip.bias"), &[c.skip]),
                    dilation: 1 << x,
                });
            }
        }
        let out_prelu = add("mask_prelu.alpha".into(), &[1]);
        let mask_w = add("mask.weight".into(), &[c.num_filters, c.skip]);
        let mask_b = add("mask.bias".into(), &[c.num_filters]);
        let dec_w = add("decoder.weight".into(), &[c.num_filters, c.kernel_len]);
        Ok(Separator {
            config,
            params,
            enc_w,
            enc_norm_g,
            enc_norm_b,
            bn_w,
            bn_b,
            blocks,
            out_prelu,
            mask_w,
            mask_b,
            dec_w,
        })
    }

    pub fn zeros(config: SeparatorConfig) -> Result<Self> {
        Self::build(config, |_, shape| Tensor::zeros(shape))
    }

    /// Norm gains 1, norm biases 0, PReLU slopes 0.25, everything else
    /// uniform `±1/sqrt(fan_in)`.
    pub fn random(config: SeparatorConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, &[]);
        let c = config;
        Self::build(config, |name, shape| {
            if name.ends_with(".gamma") {
                Tensor::filled(shape, T::one())
            } else if name.ends_with(".beta") {
                Tensor::zeros(shape)
            } else if name.ends_with(".alpha") {
                Tensor::filled(shape, T::from_f64_lossy(0.25))
            } else {
                let fan_in = if name.starts_with("encoder") {
                    c.kernel_len
                } else if name.starts_with("decoder") {
                    c.num_filters
                } else if name.contains("depthwise") {
                    c.conv_kernel
                } else if name.contains("conv1x1") {
                    c.bottleneck
                } else if name.starts_with("bottleneck") {
                    c.num_filters
                } else if name.starts_with("mask") {
                    c.skip
                } else {
                    c.hidden
                };
                Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
            }
        })
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn min_len(&self) -> usize {
        self.config.kernel_len
    }

    fn p(&self, idx: usize) -> &[T] {
        self.params.data(idx)
    }

    fn scalar(&self, idx: usize) -> T {
        self.params.data(idx)[0]
    }

    pub fn forward_train(&self, x: &[T]) -> Result<(Vec<T>, SeparatorCache<T>)> {
        let c = self.config;
        if x.len() < c.kernel_len {
            return Err(Error::ClipTooShort {
                needed: c.kernel_len,
                available: x.len(),
            });
        }
        let (l, s, n) = (c.kernel_len, c.stride(), c.num_filters);
        let frames = (x.len() - l).div_ceil(s) + 1;
        let mut windows = vec![T::zero(); frames * l];
        for f in 0..frames {
            let start = f * s;
            let end = (start + l).min(x.len());
            windows[f * l..f * l + (end - start)].copy_from_slice(&x[start..end]);
        }
        let mut encoded = linear(&windows, frames, l, self.p(self.enc_w), None, n);
        encoded.iter_mut().for_each(|v| *v = v.max(T::zero()));
        let (normalized, enc_norm) = gln_forward(&encoded, n, self.p(self.enc_norm_g), self.p(self.enc_norm_b));
        let mut z = linear(&normalized, frames, n, self.p(self.bn_w), Some(self.p(self.bn_b)), c.bottleneck);
        let mut skip_sum = vec![T::zero(); frames * c.skip];
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let u1 = linear(&z, frames, c.bottleneck, self.p(b.in_w), Some(self.p(b.in_b)), c.hidden);
            let (n1, norm1) = gln_forward(&prelu(&u1, self.scalar(b.prelu1)), c.hidden, self.p(b.norm1_g), self.p(b.norm1_b));
            let u2 = depthwise_conv(&n1, c.hidden, self.p(b.dw_w), self.p(b.dw_b), c.conv_kernel, b.dilation);
            let (n2, norm2) = gln_forward(&prelu(&u2, self.scalar(b.prelu2)), c.hidden, self.p(b.norm2_g), self.p(b.norm2_b));
            let res = linear(&n2, frames, c.hidden, self.p(b.res_w), Some(self.p(b.res_b)), c.bottleneck);
            let skip = linear(&n2, frames, c.hidden, self.p(b.skip_w), Some(self.p(b.skip_b)), c.skip);
            skip_sum.iter_mut().zip(&skip).for_each(|(a, &v)| *a = *a + v);
            let z_out: Vec<T> = z.iter().zip(&res).map(|(&a, &r)| a + r).collect();
            blocks.push(BlockCache {
                z_in: std::mem::replace(&mut z, z_out),
                u1,
                norm1,
                n1,
                u2,
                norm2,
                n2,
            });
        }
        let mask_in = prelu(&skip_sum, self.scalar(self.out_prelu));
        let mut mask = linear(&mask_in, frames, c.skip, self.p(self.mask_w), Some(self.p(self.mask_b)), n);
        mask.iter_mut().for_each(|v| *v = sigmoid(*v));
        let masked: Vec<T> = encoded.iter().zip(&mask).map(|(&e, &m)| e * m).collect();
        let mut out_frames = vec![T::zero(); frames * l];
        T::gemm(frames, n, l, T::one(), &masked, false, self.p(self.dec_w), false, T::zero(), &mut out_frames);
        let mut y = vec![T::zero(); x.len()];
        for f in 0..frames {
            let start = f * s;
            for (j, &v) in out_frames[f * l..(f + 1) * l].iter().enumerate() {
                if let Some(o) = y.get_mut(start + j) {
                    *o = *o + v;
                }
            }
        }
        Ok((
            y,
            SeparatorCache {
                len: x.len(),
                frames,
                windows,
                encoded,
                enc_norm,
                normalized,
                blocks,
                skip_sum,
                mask_in,
                mask,
                masked,
            },
        ))
    }

    pub fn backward(&self, cache: &SeparatorCache<T>, dy: &[T], grads: &mut ParamSet<T>) {
        let c = self.config;
        let (l, s, n, frames) = (c.kernel_len, c.stride(), c.num_filters, cache.frames);
        let mut d_out = vec![T::zero(); frames * l];
        for f in 0..frames {
            for j in 0..l {
                if f * s + j < cache.len {
                    d_out[f * l + j] = dy[f * s + j];
                }
            }
        }
        let mut d_masked = vec![T::zero(); frames * n];
        T::gemm(n, frames, l, T::one(), &cache.masked, true, &d_out, false, T::one(), grads.data_mut(self.dec_w));
        T::gemm(frames, l, n, T::one(), &d_out, false, self.p(self.dec_w), true, T::zero(), &mut d_masked);
        let mut d_encoded: Vec<T> = d_masked.iter().zip(&cache.mask).map(|(&d, &m)| d * m).collect();
        let d_logit: Vec<T> = d_masked
            .iter()
            .zip(&cache.encoded)
            .zip(&cache.mask)
            .map(|((&d, &e), &m)| d * e * m * (T::one() - m))
            .collect();
        let mut d_mask_in = vec![T::zero(); frames * c.skip];
        {
            let [w, b] = grads.many_mut([self.mask_w, self.mask_b]);
            linear_backward(&cache.mask_in, frames, c.skip, self.p(self.mask_w), n, &d_logit, w, Some(b), Some(&mut d_mask_in));
        }
        let d_skip = {
            let mut da = T::zero();
            let d = prelu_backward(&cache.skip_sum, self.scalar(self.out_prelu), &d_mask_in, &mut da);
            grads.data_mut(self.out_prelu)[0] = grads.data(self.out_prelu)[0] + da;
            d
        };
        let mut dz = vec![T::zero(); frames * c.bottleneck];
        for (b, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut dn2 = vec![T::zero(); frames * c.hidden];
            {
                let [w, bias] = grads.many_mut([b.res_w, b.res_b]);
                linear_backward(&bc.n2, frames, c.hidden, self.p(b.res_w), c.bottleneck, &dz, w, Some(bias), Some(&mut dn2));
            }
            {
                let [w, bias] = grads.many_mut([b.skip_w, b.skip_b]);
                linear_backward(&bc.n2, frames, c.hidden, self.p(b.skip_w), c.skip, &d_skip, w, Some(bias), Some(&mut dn2));
            }
            let da2 = {
                let [g, beta] = grads.many_mut([b.norm2_g, b.norm2_b]);
                gln_backward(&bc.norm2, c.hidden, self.p(b.norm2_g), &dn2, g, beta)
            };
            let mut dalpha = T::zero();
            let du2 = prelu_backward(&bc.u2, self.scalar(b.prelu2), &da2, &mut dalpha);
            grads.data_mut(b.prelu2)[0] = grads.data(b.prelu2)[0] + dalpha;
            let dn1 = {
                let [w, bias] = grads.many_mut([b.dw_w, b.dw_b]);
                depthwise_conv_backward(&bc.n1, c.hidden, self.p(b.dw_w), c.conv_kernel, b.dilation, &du2, w, bias)
            };
            let da1 = {
                let [g, beta] = grads.many_mut([b.norm1_g, b.norm1_b]);
                gln_backward(&bc.norm1, c.hidden, self.p(b.norm1_g), &dn1, g, beta)
            };
            let mut dalpha = T::zero();
            let du1 = prelu_backward(&bc.u1, self.scalar(b.prelu1), &da1, &mut dalpha);
            grads.data_mut(b.prelu1)[0] = grads.data(b.prelu1)[0] + dalpha;
            // Residual path: dz already holds the gradient w.r.t. z_in.
            let [w, bias] = grads.many_mut([b.in_w, b.in_b]);
            linear_backward(&bc.z_in, frames, c.bottleneck, self.p(b.in_w), c.hidden, &du1, w, Some(bias), Some(&mut dz));
        }
        let mut d_norm = vec![T::zero(); frames * n];
        {
            let [w, b] = grads.many_mut([self.bn_w, self.bn_b]);
            linear_backward(&cache.normalized, frames, n, self.p(self.bn_w), c.bottleneck, &dz, w, Some(b), Some(&mut d_norm));
        }
        let d_enc = {
            let [g, b] = grads.many_mut([self.enc_norm_g, self.enc_norm_b]);
            gln_backward(&cache.enc_norm, n, self.p(self.enc_norm_g), &d_norm, g, b)
        };
        for ((d, &a), &e) in d_encoded.iter_mut().zip(&d_enc).zip(&cache.encoded) {
            *d = if e > T::zero() { *d + a } else { T::zero() };
        }
        linear_backward(&cache.windows, frames, l, self.p(self.enc_w), n, &d_encoded, grads.data_mut(self.enc_w), None, None);
    }

    pub fn forward(&self, mixture: &AudioClip<T>) -> Result<AudioClip<T>> {
        let (y, _) = self.forward_train(mixture.samples())?;
        AudioClip::new(y, mixture.sample_rate())
    }
}

/// Runs the separator on `mixture`.
pub fn separator_forward<T: Scalar>(net: &Separator<T>, mixture: &AudioClip<T>) -> Result<AudioClip<T>> {
    net.forward(mixture)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::*;
    use rand::Rng;

    fn tiny() -> SeparatorConfig {
        SeparatorConfig {
            num_filters: 4,
            kernel_len: 4,
            bottleneck: 3,
            hidden: 5,
            skip: 2,
            conv_kernel: 3,
            blocks: 2,
            repeats: 2,
        }
    }

    #[test]
    fn default_size_is_near_one_point_four_million() {
        let cfg = SeparatorConfig::default();
        let count = cfg.param_count();
        assert_eq!(Separator::<f32>::zeros(cfg).unwrap().params().count(), count);
        assert!((count as f64 - 1.4e6).abs() / 1.4e6 <= 0.15, "{count}");
        assert_eq!(Separator::<f32>::zeros(tiny()).unwrap().params().count(), tiny().param_count());
    }

    #[test]
    fn shape_contract() {
        let net = Separator::<f32>::random(tiny(), 1).unwrap();
        for len in [4, 5, 17, 100] {
            let x: Vec<f32> = (0..len).map(|i| (i as f32 * 0.3).sin()).collect();
            let (y, _) = net.forward_train(&x).unwrap();
            assert_eq!(y.len(), len);
            assert_eq!(net.forward_train(&x).unwrap().0, y);
        }
        assert!(net.forward_train(&[0.0; 3]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut net = Separator::<f64>::random(tiny(), 2).unwrap();
        let mut rng = rng_for(9, &[]);
        // Perturb norm and slope parameters away from their initial values.
        for t in net.params_mut().tensors_mut() {
            for v in t.data.iter_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let x: Vec<f64> = (0..23).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let proj: Vec<f64> = (0..23).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, cache) = net.forward_train(&x).unwrap();
        let mut grads = net.params().zeros_like();
        net.backward(&cache, &proj, &mut grads);
        for p in 0..net.params().len() {
            for k in 0..net.params().data(p).len() {
                let mut v = net.params().data(p).to_vec();
                let n = numeric(&mut v, k, &mut |v| {
                    let saved = net.params().data(p)[k];
                    net.params_mut().data_mut(p)[k] = v[k];
                    let y = net.forward_train(&x).unwrap().0;
                    net.params_mut().data_mut(p)[k] = saved;
                    y.iter().zip(&proj).map(|(a, b)| a * b).sum()
                });
                let name = net.params().iter().nth(p).unwrap().0.to_string();
                assert_close(grads.data(p)[k], n, &format!("{name}[{k}]"));
            }
        }
    }
}

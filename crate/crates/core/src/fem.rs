//! Feature extraction: snippet sampling and a small 3D-convolutional
//! extractor producing the `T x H x W x C` local-feature volume.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnippetMode {
    /// Uniformly random start inside each segment.
    Train,
    /// Centered start (lower of two centers).
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnippetPlan {
    pub segments: Vec<Range<usize>>,
    pub starts: Vec<usize>,
    pub snippet_len: usize,
    pub mode: SnippetMode,
}

impl SnippetPlan {
    pub fn timesteps(&self) -> usize {
        self.starts.len()
    }

    /// Frame indices of snippet `t`.
    pub fn frames(&self, t: usize) -> Range<usize> {
        self.starts[t]..self.starts[t] + self.snippet_len
    }
}

/// Splits `frame_count` frames into `t` contiguous, near-equal segments and
/// picks one `snippet_len`-frame snippet from each.
pub fn plan_snippets(
    frame_count: usize,
    t: usize,
    snippet_len: usize,
    mode: SnippetMode,
    seed: u64,
) -> Result<SnippetPlan> {
    if t == 0 || snippet_len == 0 || frame_count < t * snippet_len {
        return Err(Error::invalid(format!(
            "{frame_count} frames cannot hold {t} snippets of {snippet_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segments: Vec<Range<usize>> = (0..t)
        .map(|i| (i * frame_count / t)..((i + 1) * frame_count / t))
        .collect();
    let starts = segments
        .iter()
        .map(|seg| {
            let candidates = seg.len() - snippet_len + 1;
            seg.start
                + match mode {
                    SnippetMode::Eval => (candidates - 1) / 2,
                    SnippetMode::Train => rng.random_range(0..candidates),
                }
        })
        .collect();
    Ok(SnippetPlan {
        segments,
        starts,
        snippet_len,
        mode,
    })
}

/// Gathers the planned snippets of a `frame_count x height x width` u8 video
/// into a `[T, 1, snippet_len, height, width]` tensor scaled to `[0, 1]`.
pub fn snippet_tensor(frames: &[u8], height: usize, width: usize, plan: &SnippetPlan) -> Result<Tensor> {
    let plane = height * width;
    if plane == 0 || frames.len() % plane != 0 {
        return Err(Error::invalid("frame buffer is not a whole number of frames"));
    }
    let available = frames.len() / plane;
    let mut data = Vec::with_capacity(plan.timesteps() * plan.snippet_len * plane);
    for t in 0..plan.timesteps() {
        let range = plan.frames(t);
        if range.end > available {
            return Err(Error::invalid(format!("snippet {t} exceeds {available} frames")));
        }
        data.extend(frames[range.start * plane..range.end * plane].iter().map(|&p| f64::from(p) / 255.0));
    }
    Tensor::new(&[plan.timesteps(), 1, plan.snippet_len, height, width], data)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel_t: usize,
    /// Odd spatial kernel size; padded to keep extents.
    pub kernel_s: usize,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub in_channels: usize,
    pub snippet_len: usize,
    pub blocks: Vec<ConvBlock>,
}

impl ExtractorConfig {
    /// Two `[conv3d, ReLU, 2x2 average]` blocks; the first convolves 3 frames
    /// (or the whole snippet if shorter) and the second collapses what is left.
    pub fn two_block(in_channels: usize, snippet_len: usize, hidden: usize, channels: usize) -> Self {
        let kt = snippet_len.min(3);
        ExtractorConfig {
            in_channels,
            snippet_len,
            blocks: alloc::vec![
                ConvBlock {
                    out_channels: hidden,
                    kernel_t: kt,
                    kernel_s: 3,
                    pool: true,
                },
                ConvBlock {
                    out_channels: channels,
                    kernel_t: snippet_len - kt + 1,
                    kernel_s: 3,
                    pool: true,
                },
            ],
        }
    }

    /// Feature-map `(H, W, C)` for `frame_h x frame_w` input.
    pub fn output_dims(&self, frame_h: usize, frame_w: usize) -> Result<(usize, usize, usize)> {
        let (mut t, mut h, mut w, mut c) = (self.snippet_len, frame_h, frame_w, self.in_channels);
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kernel_t == 0 || b.kernel_t > t || b.kernel_s % 2 == 0 || b.out_channels == 0 {
                return Err(Error::invalid(format!("extractor block {i} does not fit its input")));
            }
            t = t - b.kernel_t + 1;
            if b.pool {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::invalid(format!("block {i} pools odd extent {h}x{w}")));
                }
                h /= 2;
                w /= 2;
            }
            c = b.out_channels;
        }
        if t != 1 {
            return Err(Error::invalid(format!("extractor leaves temporal extent {t}, expected 1")));
        }
        if self.blocks.is_empty() {
            return Err(Error::invalid("extractor has no blocks"));
        }
        Ok((h, w, c))
    }
}

/// The local-feature volume `X`, stored as a `[T, H, W, C]` graph node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureVolume {
    pub var: Var,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl FeatureVolume {
    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    /// Wraps an existing `[T, H, W, C]` node.
    pub fn from_var(g: &Graph, var: Var) -> Result<Self> {
        match *g.shape(var) {
            [t, h, w, c] if t >= 1 && h >= 1 && w >= 1 && c >= 1 => Ok(FeatureVolume { var, t, h, w, c }),
            _ => Err(Error::invalid(format!("feature volume must be 4-D, got {:?}", g.shape(var)))),
        }
    }
}

/// Initial convolution bias. Slightly positive so that static regions, which
/// the first block's initial kernels map to zero, sit off the ReLU kink.
pub const BIAS_INIT: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct Extractor {
    pub config: ExtractorConfig,
    blocks: Vec<(ParamId, ParamId)>,
}

impl Extractor {
    pub fn new<R: Rng>(config: ExtractorConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut cin = config.in_channels;
        for (i, b) in config.blocks.iter().enumerate() {
            let shape = [b.out_channels, cin, b.kernel_t, b.kernel_s, b.kernel_s];
            let fan_in = (cin * b.kernel_t * b.kernel_s * b.kernel_s) as f64;
            let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in)).map_err(|e| Error::invalid(format!("{e}")))?;
            let mut w = Tensor::from_fn(&shape, |_| normal.sample(rng));
            if i == 0 {
                temporal_zero_mean(&mut w, b.kernel_t, b.kernel_s * b.kernel_s);
            }
            let wid = store.add(&format!("fem.block{i}.weight"), w)?;
            let bid = store.add(&format!("fem.block{i}.bias"), Tensor::full(&[b.out_channels], BIAS_INIT))?;
            blocks.push((wid, bid));
            cin = b.out_channels;
        }
        Ok(Extractor { config, blocks })
    }

    /// `frames` is `[T, in_channels, snippet_len, height, width]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frames: Var) -> Result<FeatureVolume> {
        let [t, cin, len, fh, fw] = *g.shape(frames) else {
            return Err(Error::invalid(format!("frames must be 5-D, got {:?}", g.shape(frames))));
        };
        if cin != self.config.in_channels || len != self.config.snippet_len {
            return Err(Error::invalid(format!(
                "frames {:?} do not match extractor input ({} channels, {} frames)",
                g.shape(frames),
                self.config.in_channels,
                self.config.snippet_len
            )));
        }
        let (h, w, c) = self.config.output_dims(fh, fw)?;
        let mut x = frames;
        for (spec, &(wid, bid)) in self.config.blocks.iter().zip(&self.blocks) {
            let wv = g.param(store, wid);
            let bv = g.param(store, bid);
            let pad = spec.kernel_s / 2;
            x = g.conv3d(x, wv, bv, [0, pad, pad])?;
            x = g.relu(x)?;
            if spec.pool {
                x = g.avg_pool2(x)?;
            }
        }
        let x = g.reshape(x, &[t, c, h, w])?;
        let var = g.permute(x, &[0, 2, 3, 1])?;
        Ok(FeatureVolume { var, t, h, w, c })
    }
}

/// Removes each kernel's mean along the temporal axis so that the first
/// block starts out blind to static appearance and responds to change.
/// Single-frame kernels are left alone.
fn temporal_zero_mean(w: &mut Tensor, kernel_t: usize, plane: usize) {
    if kernel_t < 2 {
        return;
    }
    for kernel in w.data_mut().chunks_mut(kernel_t * plane) {
        for p in 0..plane {
            let mean = (0..kernel_t).map(|d| kernel[d * plane + p]).sum::<f64>() / kernel_t as f64;
            for d in 0..kernel_t {
                kernel[d * plane + p] -= mean;
            }
        }
    }
}

/// Spatial average of `X`: `[T, C]`.
pub fn global_pool(g: &mut Graph, x: &FeatureVolume) -> Result<Var> {
    let flat = g.reshape(x.var, &[x.t, x.positions(), x.c])?;
    g.mean_axis(flat, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn eval_plan_for_exact_fit() {
        let plan = plan_snippets(32, 8, 4, SnippetMode::Eval, 0).unwrap();
        assert_eq!(plan.starts, vec![0, 4, 8, 12, 16, 20, 24, 28]);
    }

    #[test]
    fn eval_plan_takes_lower_center() {
        let plan = plan_snippets(40, 8, 4, SnippetMode::Eval, 0).unwrap();
        for i in 0..8 {
            assert_eq!(plan.segments[i], 5 * i..5 * i + 5);
            assert_eq!(plan.starts[i], 5 * i);
        }
    }

    #[test]
    fn train_plan_is_seeded() {
        let a = plan_snippets(100, 8, 4, SnippetMode::Train, 3).unwrap();
        let b = plan_snippets(100, 8, 4, SnippetMode::Train, 3).unwrap();
        assert_eq!(a, b);
        for (seg, &s) in a.segments.iter().zip(&a.starts) {
            assert!(s >= seg.start && s + 4 <= seg.end);
        }
    }

    #[test]
    fn too_few_frames() {
        assert!(plan_snippets(31, 8, 4, SnippetMode::Eval, 0).is_err());
    }

    #[test]
    fn shape_arithmetic() {
        let cfg = ExtractorConfig::two_block(1, 4, 8, 32);
        assert_eq!(cfg.output_dims(64, 64).unwrap(), (16, 16, 32));
        assert_eq!(cfg.output_dims(56, 56).unwrap(), (14, 14, 32));
    }

    fn identity_extractor(store: &mut ParamStore) -> Extractor {
        let cfg = ExtractorConfig {
            in_channels: 1,
            snippet_len: 1,
            blocks: vec![ConvBlock {
                out_channels: 1,
                kernel_t: 1,
                kernel_s: 1,
                pool: false,
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = Extractor::new(cfg, store, &mut rng).unwrap();
        store.set_value("fem.block0.weight", Tensor::full(&[1, 1, 1, 1, 1], 1.0)).unwrap();
        store.set_value("fem.block0.bias", Tensor::zeros(&[1])).unwrap();
        ex
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut store = ParamStore::new();
        let ex = identity_extractor(&mut store);
        let frames = Tensor::from_fn(&[2, 1, 1, 3, 3], |i| i as f64 / 18.0);
        let mut g = Graph::new();
        let fv = g.constant(frames.clone());
        let x = ex.forward(&mut g, &store, fv).unwrap();
        assert_eq!((x.t, x.h, x.w, x.c), (2, 3, 3, 1));
        assert_eq!(g.value(x.var).data(), frames.data());
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = Extractor::new(ExtractorConfig::two_block(1, 4, 4, 8), &mut store, &mut rng).unwrap();
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
        let mut g = Graph::new();
        let fv = g.constant(Tensor::from_fn(&[2, 1, 4, 8, 8], |i| (i % 7) as f64));
        let x = ex.forward(&mut g, &store, fv).unwrap();
        assert!(g.value(x.var).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fresh_extractor_ignores_static_frames() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ex = Extractor::new(ExtractorConfig::two_block(1, 4, 4, 8), &mut store, &mut rng).unwrap();
        let w = store.value(store.find("fem.block0.weight").unwrap());
        for kernel in w.data().chunks(27) {
            for p in 0..9 {
                assert!((kernel[p] + kernel[9 + p] + kernel[18 + p]).abs() < 1e-12);
            }
        }
        // two different static videos: every snippet frame identical
        let run = |g: &mut Graph, scale: usize| {
            let frame: Vec<f64> = (0..64).map(|i| ((i * scale) % 11) as f64 / 11.0).collect();
            let fv = g.constant(Tensor::from_fn(&[2, 1, 4, 8, 8], |i| frame[i % 64]));
            ex.forward(g, &store, fv).unwrap().var
        };
        let mut g = Graph::new();
        let (a, b) = (run(&mut g, 37), run(&mut g, 5));
        for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_of_constant_and_of_ramp() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::full(&[2, 3, 3, 2], 1.25));
        let x = FeatureVolume::from_var(&g, v).unwrap();
        let p = global_pool(&mut g, &x).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 1.25));

        let v = g.constant(Tensor::new(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = FeatureVolume::from_var(&g, v).unwrap();
        let p = global_pool(&mut g, &x).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
    }

    #[test]
    fn snippet_tensor_layout() {
        let frames: Vec<u8> = (0..8 * 4).map(|i| (i / 4) as u8).collect(); // 8 frames of 2x2
        let plan = plan_snippets(8, 2, 2, SnippetMode::Eval, 0).unwrap();
        let t = snippet_tensor(&frames, 2, 2, &plan).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 2, 2]);
        assert_eq!(t.at(&[1, 0, 1, 0, 0]), 6.0 / 255.0);
    }
}

//! Score regression, heatmap prediction and the composite losses.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fem::FeatureVolume;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::sgm::{dense, linear_init};
use crate::tensor::Tensor;

/// Clamp applied to predicted heatmaps before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

/// `f_s`: one linear map from the pooled context to a scalar.
#[derive(Clone, Copy, Debug)]
pub struct ScoreHead {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
}

impl ScoreHead {
    pub fn new<R: Rng>(store: &mut ParamStore, input: usize, rng: &mut R) -> Result<Self> {
        let w = store.add("head.score.w", linear_init(input, 1, rng)?)?;
        let b = store.add("head.score.b", Tensor::zeros(&[1]))?;
        Ok(ScoreHead { w, b, input })
    }

    /// `f_s(mean_t [c_t^0; ...; c_t^K])` for contexts shaped `[T, ...]`.
    pub fn predict(&self, g: &mut Graph, store: &ParamStore, contexts: Var) -> Result<Var> {
        let shape = g.shape(contexts).to_vec();
        if shape.is_empty() || shape[1..].iter().product::<usize>() != self.input {
            return Err(Error::invalid(format!(
                "score head expects {} features per step, got {shape:?}",
                self.input
            )));
        }
        let flat = g.reshape(contexts, &[shape[0], self.input])?;
        let pooled = g.mean_axis(flat, 0)?;
        let row = g.reshape(pooled, &[1, self.input])?;
        let out = dense(g, store, row, self.w, self.b)?;
        g.reshape(out, &[])
    }
}

/// `f_HPM`: a 1x1 convolution `C -> 1` followed by a logistic.
#[derive(Clone, Copy, Debug)]
pub struct HeatmapHead {
    pub w: ParamId,
    pub b: ParamId,
    pub channels: usize,
}

impl HeatmapHead {
    pub fn new<R: Rng>(store: &mut ParamStore, channels: usize, rng: &mut R) -> Result<Self> {
        let w = store.add("head.hpm.w", linear_init(channels, 1, rng)?)?;
        let b = store.add("head.hpm.b", Tensor::zeros(&[1]))?;
        Ok(HeatmapHead { w, b, channels })
    }

    /// `logistic(f_HPM(P^m * X))` as `[T, H, W]`, where every channel of
    /// `X_tij` is scaled by `P^m_tij`.
    pub fn predict(&self, g: &mut Graph, store: &ParamStore, x: &FeatureVolume, p: Var, m: usize) -> Result<Var> {
        let k = match *g.shape(p) {
            [t, h, w, k] if t == x.t && h == x.h && w == x.w => k,
            _ => return Err(Error::invalid("assignment tensor does not match the feature volume")),
        };
        if m >= k {
            return Err(Error::invalid(format!("supervised group {m} out of range for K = {k}")));
        }
        if x.c != self.channels {
            return Err(Error::invalid(format!("heatmap head expects {} channels, got {}", self.channels, x.c)));
        }
        let pm = g.slice(p, 3, m, 1)?;
        let masked = g.mul(x.var, pm)?;
        let n = x.t * x.positions();
        let flat = g.reshape(masked, &[n, x.c])?;
        let logits = dense(g, store, flat, self.w, self.b)?;
        let heat = g.sigmoid(logits)?;
        g.reshape(heat, &[x.t, x.h, x.w])
    }
}

/// Gaussian target heatmaps `[T, H, W]` from per-timestep instrument
/// positions `(u, v)` = (column, row) in feature-map coordinates. Instruments
/// combine by maximum; timesteps with none are all zero.
pub fn render_target_heatmaps(positions: &[Vec<(f64, f64)>], h: usize, w: usize, radius: f64) -> Result<Tensor> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("target radius must be positive, got {radius}")));
    }
    let mut data = vec![0.0; positions.len() * h * w];
    let denom = 2.0 * radius * radius;
    for (t, tools) in positions.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                let v = tools
                    .iter()
                    .map(|&(u, v)| {
                        let (di, dj) = (i as f64 - v, j as f64 - u);
                        libm::exp(-(di * di + dj * dj) / denom)
                    })
                    .fold(0.0, f64::max);
                data[(t * h + i) * w + j] = v;
            }
        }
    }
    Tensor::new(&[positions.len(), h, w], data)
}

/// Mean binary cross-entropy between `target` and the clamped `pred`.
pub fn position_loss(g: &mut Graph, target: &Tensor, pred: Var) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(Error::Shape {
            op: "position_loss",
            lhs: target.shape().to_vec(),
            rhs: g.shape(pred).to_vec(),
        });
    }
    let clamped = g.clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let log_p = g.ln(clamped)?;
    let neg = g.scale(clamped, -1.0)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    let log_q = g.ln(one_minus)?;
    let pos_w = g.constant(target.clone());
    let neg_w = g.constant(Tensor::new(target.shape(), target.data().iter().map(|v| 1.0 - v).collect())?);
    let a = g.mul(log_p, pos_w)?;
    let b = g.mul(log_q, neg_w)?;
    let ll = g.add(a, b)?;
    let mean = g.mean(ll)?;
    g.scale(mean, -1.0)
}

/// `(s - s_hat)^2` for a constant target `s`.
pub fn squared_error(g: &mut Graph, s: f64, s_hat: Var) -> Result<Var> {
    let target = g.constant(Tensor::new(g.shape(s_hat), vec![s])?);
    let d = g.sub(s_hat, target)?;
    g.square(d)
}

/// `L = (s - s_hat)^2 + lambda * L_exist`
pub fn total_loss(g: &mut Graph, s: f64, s_hat: Var, exist: Var, lambda: f64) -> Result<Var> {
    let mse = squared_error(g, s, s_hat)?;
    weighted_sum(g, mse, &[(exist, lambda)])
}

/// `L' = (s - s_hat)^2 + lambda1 * L_exist + lambda2 * L_pos`
pub fn total_loss_supervised(
    g: &mut Graph,
    s: f64,
    s_hat: Var,
    exist: Var,
    pos: Var,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var> {
    let mse = squared_error(g, s, s_hat)?;
    weighted_sum(g, mse, &[(exist, lambda1), (pos, lambda2)])
}

/// `base + sum_i w_i * term_i`, all scalars.
pub fn weighted_sum(g: &mut Graph, base: Var, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc = base;
    for &(term, weight) in terms {
        let scaled = g.scale(term, weight)?;
        let scaled = g.reshape(scaled, g.shape(acc).to_vec().as_slice())?;
        acc = g.add(acc, scaled)?;
    }
    Ok(acc)
}

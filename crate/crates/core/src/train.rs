//! Minibatch training, prediction and the cross-validation loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{fisher_z_average, mae, spearman, SplitScheme};
use crate::fem::{plan_snippets, snippet_tensor, SnippetMode, SnippetPlan};
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::heads::render_target_heatmaps;
use crate::model::{denormalize_score, normalize_score, LossConfig, Model, ModelConfig, Variant};
use crate::optim::{Sgd, SgdConfig};
use crate::params::ParamStore;
use crate::seed::derive_seed;
use crate::sgm::{hard_assignment, AssignmentMap};
#[cfg(test)]
use crate::sgm::{SIGMA_FIT_MAX, SIGMA_FIT_MIN};
use crate::synth::{generate_episode, Episode, SynthConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Rescale each minibatch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    /// Fit the codebook to the training features before the first epoch.
    pub kmeans_init: bool,
    /// Ridge penalty of a closed-form score-head fit before the first
    /// epoch (after any codebook fit); `None` keeps the random head.
    pub head_init: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sgd: SgdConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            clip_norm: None,
            kmeans_init: false,
            head_init: None,
        }
    }
}

/// Per-epoch means over the training episodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub mse: f64,
    pub exist: Option<f64>,
    pub pos: Option<f64>,
}

impl EpochLog {
    /// `epoch=<e> lr=<lr> loss=<total> mse=<mse> exist=<v|-> pos=<v|->`
    pub fn line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::from("-"), |v| format!("{v:e}"));
        format!(
            "epoch={} lr={:e} loss={:e} mse={:e} exist={} pos={}",
            self.epoch,
            self.lr,
            self.total,
            self.mse,
            opt(self.exist),
            opt(self.pos)
        )
    }
}

/// Snippet plan and `[T, 1, L, H, W]` input of one episode.
pub fn episode_input(model: &Model, ep: &Episode, mode: SnippetMode, seed: u64) -> Result<(SnippetPlan, Tensor)> {
    let cfg = &model.config;
    let plan = plan_snippets(ep.frame_count, cfg.timesteps, cfg.snippet_len, mode, seed)?;
    let frames = snippet_tensor(&ep.frames, ep.height, ep.width, &plan)?;
    Ok((plan, frames))
}

/// Tool positions per timestep in feature-map coordinates: the mean pixel
/// position over the snippet's frames, mapped so that feature pixel `j`
/// sits at the center of the input pixels it pools.
pub fn feature_positions(ep: &Episode, plan: &SnippetPlan, stride_h: usize, stride_w: usize) -> Vec<Vec<(f64, f64)>> {
    let to_feat = |x: f64, stride: usize| (x - (stride as f64 - 1.0) / 2.0) / stride as f64;
    (0..plan.timesteps())
        .map(|t| {
            let frames = plan.frames(t);
            let n = frames.len() as f64;
            let tools = ep.tool_tracks.get(frames.start).map_or(0, Vec::len);
            (0..tools)
                .map(|k| {
                    let (su, sv) = frames
                        .clone()
                        .map(|f| ep.tool_tracks[f][k])
                        .fold((0.0, 0.0), |(a, b), (u, v)| (a + u, b + v));
                    (to_feat(su / n, stride_w), to_feat(sv / n, stride_h))
                })
                .collect()
        })
        .collect()
}

fn strides(ep: &Episode, h: usize, w: usize) -> Result<(usize, usize)> {
    if h == 0 || w == 0 || ep.height % h != 0 || ep.width % w != 0 {
        return Err(Error::invalid(format!(
            "{}x{} frames do not tile {h}x{w} feature maps",
            ep.height, ep.width
        )));
    }
    Ok((ep.height / h, ep.width / w))
}

/// Gaussian target heatmaps for `ep` at the model's feature resolution.
pub fn target_heatmaps(model: &Model, ep: &Episode, plan: &SnippetPlan) -> Result<Tensor> {
    let (h, w, _) = model.config.extractor().output_dims(ep.height, ep.width)?;
    let (sh, sw) = strides(ep, h, w)?;
    render_target_heatmaps(&feature_positions(ep, plan, sh, sw), h, w, model.config.target_radius)
}

/// Lloyd iterations used by [`init_codebook`].
pub const KMEANS_ITERS: usize = 25;

/// Fits the codebook to the current extractor's features of `episodes`
/// (centered snippets). No-op for models without groups.
pub fn init_codebook(model: &Model, store: &mut ParamStore, episodes: &[&Episode], seed: u64) -> Result<()> {
    let Some(codebook) = model.codebook else {
        return Ok(());
    };
    let mut points = Vec::new();
    for ep in episodes {
        let (_, frames) = episode_input(model, ep, SnippetMode::Eval, 0)?;
        let mut g = Graph::new();
        let input = g.constant(frames);
        let features = model.extractor.forward(&mut g, store, input)?;
        points.extend_from_slice(g.value(features.var).data());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX - 1]));
    codebook.fit(store, &points, KMEANS_ITERS, &mut rng)
}

/// Solves `A x = b` for symmetric positive definite `n x n` row-major `A`.
fn cholesky_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    for j in 0..n {
        let d = a[j * n + j] - (0..j).map(|k| a[j * n + k] * a[j * n + k]).sum::<f64>();
        if !(d > 0.0) {
            return Err(Error::invalid("ridge system is not positive definite"));
        }
        let d = libm::sqrt(d);
        a[j * n + j] = d;
        for i in j + 1..n {
            let s = a[i * n + j] - (0..j).map(|k| a[i * n + k] * a[j * n + k]).sum::<f64>();
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        b[i] = (b[i] - (0..i).map(|k| a[i * n + k] * b[k]).sum::<f64>()) / a[i * n + i];
    }
    for i in (0..n).rev() {
        b[i] = (b[i] - (i + 1..n).map(|k| a[k * n + i] * b[k]).sum::<f64>()) / a[i * n + i];
    }
    Ok(b)
}

/// Score-head input of `ep`: the temporal mean of its contexts.
fn head_input(model: &Model, store: &ParamStore, ep: &Episode) -> Result<Vec<f64>> {
    let (_, frames) = episode_input(model, ep, SnippetMode::Eval, 0)?;
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, store, &frames)?;
    let c = g.value(fwd.contexts);
    let t = c.shape()[0];
    let d = c.len() / t;
    Ok((0..d).map(|j| (0..t).map(|s| c.data()[s * d + j]).sum::<f64>() / t as f64).collect())
}

/// Sets the score head to the ridge regression of the normalized scores of
/// `episodes` on the current head inputs. Inputs are standardized over the
/// episodes, `lambda` penalizes the standardized weights, and
/// constant inputs get weight zero.
pub fn init_score_head(model: &Model, store: &mut ParamStore, episodes: &[&Episode], lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("ridge penalty must be > 0, got {lambda}")));
    }
    if episodes.is_empty() {
        return Err(Error::invalid("no episodes for the head fit"));
    }
    let xs = episodes
        .iter()
        .map(|ep| head_input(model, store, ep))
        .collect::<Result<Vec<_>>>()?;
    let ys: Vec<f64> = episodes.iter().map(|ep| normalize_score(ep.score)).collect();
    let n = xs.len() as f64;
    let d = model.score.input;
    let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| libm::sqrt(xs.iter().map(|x| (x[j] - mean[j]) * (x[j] - mean[j])).sum::<f64>() / n))
        .collect();
    let z: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| (0..d).map(|j| if sd[j] > 0.0 { (x[j] - mean[j]) / sd[j] } else { 0.0 }).collect())
        .collect();
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut a = alloc::vec![0.0; d * d];
    let mut b = alloc::vec![0.0; d];
    for (zi, &y) in z.iter().zip(&ys) {
        for p in 0..d {
            b[p] += zi[p] * (y - y_mean);
            for q in 0..d {
                a[p * d + q] += zi[p] * zi[q];
            }
        }
    }
    for p in 0..d {
        a[p * d + p] += lambda;
    }
    let w_std = cholesky_solve(a, b, d)?;
    let w: Vec<f64> = (0..d).map(|j| if sd[j] > 0.0 { w_std[j] / sd[j] } else { 0.0 }).collect();
    let bias = y_mean - w.iter().zip(&mean).map(|(w, m)| w * m).sum::<f64>();
    store.get_mut(model.score.w).value = Tensor::new(&[d, 1], w)?;
    store.get_mut(model.score.b).value = Tensor::new(&[1], alloc::vec![bias])?;
    Ok(())
}

fn value(g: &Graph, v: Var) -> f64 {
    g.value(v).item().unwrap_or(f64::NAN)
}

fn clip_gradients(store: &mut ParamStore, max_norm: f64) {
    let sq: f64 = store.iter().flat_map(|p| p.grad.data().iter()).map(|g| g * g).sum();
    let norm = libm::sqrt(sq);
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= s;
            }
        }
    }
}

/// Trains in place with minibatch SGD. Each
/// episode's loss is divided by the batch size before its backward pass, so
/// accumulated gradients are batch means. `on_epoch` sees every epoch log.
pub fn train<F: FnMut(&EpochLog)>(
    model: &Model,
    store: &mut ParamStore,
    episodes: &[&Episode],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>> {
    cfg.sgd.validate()?;
    if episodes.is_empty() {
        return Err(Error::invalid("no training episodes"));
    }
    if cfg.kmeans_init {
        init_codebook(model, store, episodes, cfg.seed)?;
    }
    if let Some(lambda) = cfg.head_init {
        init_score_head(model, store, episodes, lambda)?;
    }
    let mut logs = Vec::with_capacity(cfg.sgd.epochs);
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut sgd = Sgd::new();
    for epoch in 0..cfg.sgd.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64, u64::MAX])));
        let mut sums = [0.0f64; 4];
        let (mut has_exist, mut has_pos) = (false, false);
        for batch in order.chunks(cfg.sgd.batch_size) {
            store.zero_grad();
            for &idx in batch {
                let ep = episodes[idx];
                let seed = derive_seed(cfg.seed, &[epoch as u64, idx as u64]);
                let (plan, frames) = episode_input(model, ep, SnippetMode::Train, seed)?;
                let target = match model.heatmap {
                    Some(_) => Some(target_heatmaps(model, ep, &plan)?),
                    None => None,
                };
                let mut g = Graph::new();
                let fwd = model.forward(&mut g, store, &frames)?;
                let terms = model.loss(&mut g, &fwd, ep.score, target.as_ref(), &cfg.loss)?;
                let parts = [
                    ("mse", Some(terms.mse)),
                    ("existence loss", terms.exist),
                    ("position loss", terms.pos),
                    ("total loss", Some(terms.total)),
                ];
                for (name, v) in parts {
                    if let Some(v) = v {
                        if !value(&g, v).is_finite() {
                            return Err(Error::NonFiniteValue {
                                what: format!("{name} at epoch {epoch}"),
                            });
                        }
                    }
                }
                sums[0] += value(&g, terms.total);
                sums[1] += value(&g, terms.mse);
                if let Some(e) = terms.exist {
                    sums[2] += value(&g, e);
                    has_exist = true;
                }
                if let Some(p) = terms.pos {
                    sums[3] += value(&g, p);
                    has_pos = true;
                }
                let scaled = g.scale(terms.total, 1.0 / batch.len() as f64)?;
                g.backward(scaled, store)?;
            }
            if let Some(max_norm) = cfg.clip_norm {
                clip_gradients(store, max_norm);
            }
            sgd.step(store, epoch, &cfg.sgd)?;
        }
        let n = episodes.len() as f64;
        let log = EpochLog {
            epoch,
            lr: cfg.sgd.learning_rate(epoch),
            total: sums[0] / n,
            mse: sums[1] / n,
            exist: has_exist.then(|| sums[2] / n),
            pos: has_pos.then(|| sums[3] / n),
        };
        on_epoch(&log);
        logs.push(log);
    }
    store.zero_grad();
    Ok(logs)
}

/// Score estimate in rating units from centered snippets.
pub fn predict(model: &Model, store: &ParamStore, ep: &Episode) -> Result<f64> {
    let (_, frames) = episode_input(model, ep, SnippetMode::Eval, 0)?;
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, store, &frames)?;
    Ok(denormalize_score(value(&g, fwd.score)))
}

/// Hard assignment map from centered snippets, `None` for the baseline.
pub fn assignment_map(model: &Model, store: &ParamStore, ep: &Episode) -> Result<Option<(SnippetPlan, AssignmentMap)>> {
    let (plan, frames) = episode_input(model, ep, SnippetMode::Eval, 0)?;
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, store, &frames)?;
    match fwd.assignment {
        Some(p) => Ok(Some((plan, hard_assignment(g.value(p))?))),
        None => Ok(None),
    }
}

/// Feature positions within `radius` of some tool, per timestep.
pub fn tool_mask(positions: &[Vec<(f64, f64)>], h: usize, w: usize, radius: f64) -> Vec<bool> {
    let mut mask = alloc::vec![false; positions.len() * h * w];
    for (t, tools) in positions.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                mask[(t * h + i) * w + j] = tools.iter().any(|&(u, v)| {
                    let (di, dj) = (i as f64 - v, j as f64 - u);
                    di * di + dj * dj <= radius * radius
                });
            }
        }
    }
    mask
}

/// IoU between positions labelled `group` and the dilated tool mask, or
/// `None` when both are empty.
pub fn group_iou(model: &Model, store: &ParamStore, ep: &Episode, group: usize) -> Result<Option<f64>> {
    let Some((plan, map)) = assignment_map(model, store, ep)? else {
        return Err(Error::invalid("IoU needs the grouped variant"));
    };
    let (sh, sw) = strides(ep, map.h, map.w)?;
    let truth = tool_mask(&feature_positions(ep, &plan, sh, sw), map.h, map.w, model.config.target_radius);
    let (mut inter, mut union) = (0usize, 0usize);
    for (label, &tool) in map.labels.iter().zip(&truth) {
        let pred = *label == group;
        inter += usize::from(pred && tool);
        union += usize::from(pred || tool);
    }
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

/// Configuration of the gradient-check instance: `T = 3`, `H = W = 4`,
/// `K = 2`, `D_h = 3`, fed 16x16 frames.
pub fn tiny_config(supervise_positions: bool) -> ModelConfig {
    ModelConfig {
        k: 2,
        channels: 3,
        extractor_hidden: 2,
        group_mid: 3,
        group_out: 2,
        hidden: 3,
        timesteps: 3,
        snippet_len: 2,
        in_channels: 1,
        variant: Variant::Visa,
        supervise_positions,
        supervised_group: 1,
        target_radius: 1.0,
    }
}

/// A seeded 16x16 episode sized for [`tiny_config`].
pub fn tiny_episode(seed: u64) -> Result<Episode> {
    let cfg = SynthConfig {
        frame_size: 16,
        frame_count: 6,
        tool_count: 1,
        tool_radius: 1.0,
        trajectory_noise: 0.5,
        seed,
        ..SynthConfig::default()
    };
    generate_episode(&cfg, seed)
}

/// Gradient check of the full loss (`L`, or `L'` when `model` supervises
/// positions) on one episode with eval-mode snippets.
pub fn check_model_gradients(
    model: &Model,
    store: &mut ParamStore,
    ep: &Episode,
    loss: &LossConfig,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (plan, frames) = episode_input(model, ep, SnippetMode::Eval, 0)?;
    let target = match model.heatmap {
        Some(_) => Some(target_heatmaps(model, ep, &plan)?),
        None => None,
    };
    grad_check(store, config, |g, store| {
        let fwd = model.forward(g, store, &frames)?;
        Ok(model.loss(g, &fwd, ep.score, target.as_ref(), loss)?.total)
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldMetrics {
    pub fold: usize,
    pub corr: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub folds: Vec<FoldMetrics>,
    pub corr: f64,
    pub mae: f64,
    /// Out-of-fold prediction of every episode.
    pub predictions: Vec<f64>,
}

/// Largest correlation magnitude entering the Fisher average, so that a
/// perfectly ranked fold still aggregates.
pub const FISHER_CLAMP: f64 = 1.0 - 1e-12;

impl CvReport {
    /// `fold=<i> corr=<c> mae=<m>` per fold, then `aggregate corr=<c> mae=<m>`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for f in &self.folds {
            out.push_str(&format!("fold={} corr={:.6} mae={:.6}\n", f.fold, f.corr, f.mae));
        }
        out.push_str(&format!("aggregate corr={:.6} mae={:.6}\n", self.corr, self.mae));
        out
    }
}

/// Runs `fit_predict(fold, train, test)` for every fold; it returns one
/// prediction per test index. Fold correlations are Fisher-z averaged and
/// fold MAEs arithmetically averaged.
pub fn cross_validate<F>(scores: &[f64], scheme: &SplitScheme, mut fit_predict: F) -> Result<CvReport>
where
    F: FnMut(usize, &[usize], &[usize]) -> Result<Vec<f64>>,
{
    if scores.len() != scheme.assignment.len() {
        return Err(Error::invalid("split does not cover the dataset"));
    }
    let mut folds = Vec::with_capacity(scheme.folds);
    let mut predictions = alloc::vec![f64::NAN; scores.len()];
    for fold in 0..scheme.folds {
        let test = scheme.test_indices(fold);
        let train = scheme.train_indices(fold);
        let preds = fit_predict(fold, &train, &test)?;
        if preds.len() != test.len() {
            return Err(Error::invalid(format!("fold {fold}: {} predictions for {} episodes", preds.len(), test.len())));
        }
        let truth: Vec<f64> = test.iter().map(|&i| scores[i]).collect();
        for (&i, &p) in test.iter().zip(&preds) {
            predictions[i] = p;
        }
        folds.push(FoldMetrics {
            fold,
            corr: spearman(&preds, &truth)?,
            mae: mae(&preds, &truth)?,
        });
    }
    let clamped: Vec<f64> = folds.iter().map(|f| f.corr.clamp(-FISHER_CLAMP, FISHER_CLAMP)).collect();
    Ok(CvReport {
        corr: fisher_z_average(&clamped)?,
        mae: folds.iter().map(|f| f.mae).sum::<f64>() / folds.len() as f64,
        folds,
        predictions,
    })
}

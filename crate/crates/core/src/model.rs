//! The assembled network: extractor, grouping, temporal context and heads,
//! plus the pooled-feature baseline that skips grouping.

use alloc::format;
use alloc::string::String;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fem::{global_pool, Extractor, ExtractorConfig, FeatureVolume};
use crate::graph::{Graph, Var};
use crate::heads::{position_loss, squared_error, weighted_sum, HeatmapHead, ScoreHead};
use crate::params::ParamStore;
use crate::sgm::{aggregate, assign, existence_loss, ExistenceRegConfig, GroupCodebook, GroupTransform};
use crate::tcmm::ContextModel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Grouping, per-group BiLSTMs and the global stream.
    Visa,
    /// Global stream only.
    PooledBaseline,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Visa => "visa",
            Variant::PooledBaseline => "pooled-baseline",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "visa" => Some(Variant::Visa),
            "pooled-baseline" => Some(Variant::PooledBaseline),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of semantic groups `K`.
    pub k: usize,
    /// Feature channels `C`.
    pub channels: usize,
    /// Channels of the first extractor block.
    pub extractor_hidden: usize,
    /// Hidden width of `f_g`.
    pub group_mid: usize,
    /// Output width `C'` of `f_g`.
    pub group_out: usize,
    /// LSTM hidden size `D_h`.
    pub hidden: usize,
    pub timesteps: usize,
    pub snippet_len: usize,
    pub in_channels: usize,
    pub variant: Variant,
    pub supervise_positions: bool,
    /// Group `m` supervised by the heatmap head.
    pub supervised_group: usize,
    /// Gaussian radius of target heatmaps, in feature-map pixels.
    pub target_radius: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 3,
            channels: 32,
            extractor_hidden: 16,
            group_mid: 32,
            group_out: 32,
            hidden: 32,
            timesteps: 32,
            snippet_len: 4,
            in_channels: 1,
            variant: Variant::Visa,
            supervise_positions: false,
            supervised_group: 1,
            target_radius: 1.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("channels", self.channels),
            ("extractor_hidden", self.extractor_hidden),
            ("group_mid", self.group_mid),
            ("group_out", self.group_out),
            ("hidden", self.hidden),
            ("timesteps", self.timesteps),
            ("snippet_len", self.snippet_len),
            ("in_channels", self.in_channels),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model.{name} must be >= 1")));
        }
        if self.variant == Variant::Visa && self.k == 0 {
            return Err(Error::invalid("the grouped variant needs K >= 1"));
        }
        if self.supervise_positions {
            if self.variant != Variant::Visa {
                return Err(Error::invalid("position supervision needs the grouped variant"));
            }
            if self.supervised_group >= self.k {
                return Err(Error::invalid(format!(
                    "supervised group {} out of range for K = {}",
                    self.supervised_group, self.k
                )));
            }
        }
        if !(self.target_radius > 0.0) {
            return Err(Error::invalid("target_radius must be positive"));
        }
        Ok(())
    }

    pub fn extractor(&self) -> ExtractorConfig {
        ExtractorConfig::two_block(self.in_channels, self.snippet_len, self.extractor_hidden, self.channels)
    }

    /// Groups actually used: `K` for the grouped variant, 0 for the baseline.
    pub fn active_groups(&self) -> usize {
        match self.variant {
            Variant::Visa => self.k,
            Variant::PooledBaseline => 0,
        }
    }
}

/// Loss weights and the existence prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// `lambda` of the unsupervised loss.
    pub lambda_exist: f64,
    /// `lambda_1` of the supervised loss.
    pub lambda1: f64,
    /// `lambda_2` of the supervised loss.
    pub lambda2: f64,
    pub existence: ExistenceRegConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_exist: 10.0,
            lambda1: 10.0,
            lambda2: 20.0,
            existence: ExistenceRegConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub extractor: Extractor,
    pub codebook: Option<GroupCodebook>,
    pub transform: Option<GroupTransform>,
    pub context: ContextModel,
    pub score: ScoreHead,
    pub heatmap: Option<HeatmapHead>,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub features: FeatureVolume,
    /// `[T, H, W, K]`, absent for the baseline.
    pub assignment: Option<Var>,
    /// `[T, K + 1, 2 D_h]`
    pub contexts: Var,
    /// Normalized score estimate.
    pub score: Var,
    /// `[T, H, W]`, present when positions are supervised.
    pub heatmap: Option<Var>,
}

/// Scalar loss nodes of one episode.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub mse: Var,
    pub exist: Option<Var>,
    pub pos: Option<Var>,
}

impl Model {
    /// Builds the model, registering freshly initialized parameters drawn
    /// from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let extractor = Extractor::new(config.extractor(), &mut store, &mut rng)?;
        let groups = config.active_groups();
        let (codebook, transform) = if groups > 0 {
            (
                Some(GroupCodebook::new(&mut store, groups, config.channels, &mut rng)?),
                Some(GroupTransform::new(
                    &mut store,
                    config.channels,
                    config.group_mid,
                    config.group_out,
                    &mut rng,
                )?),
            )
        } else {
            (None, None)
        };
        let context = ContextModel::new(
            &mut store,
            config.channels,
            config.group_out,
            groups,
            config.hidden,
            &mut rng,
        )?;
        let score = ScoreHead::new(&mut store, context.slots() * context.context_dim(), &mut rng)?;
        let heatmap = if config.supervise_positions {
            Some(HeatmapHead::new(&mut store, config.channels, &mut rng)?)
        } else {
            None
        };
        Ok((
            Model {
                config,
                extractor,
                codebook,
                transform,
                context,
                score,
                heatmap,
            },
            store,
        ))
    }

    /// Forward pass over `[T, in_channels, snippet_len, height, width]` frames.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frames: &Tensor) -> Result<Forward> {
        if frames.shape().first() != Some(&self.config.timesteps) {
            return Err(Error::invalid(format!(
                "expected {} snippets, got shape {:?}",
                self.config.timesteps,
                frames.shape()
            )));
        }
        let input = g.constant(frames.clone());
        let features = self.extractor.forward(g, store, input)?;
        let pooled = global_pool(g, &features)?;
        let (assignment, group_features) = match (&self.codebook, &self.transform) {
            (Some(codebook), Some(transform)) => {
                let cb = codebook.bind(g, store)?;
                let p = assign(g, &features, &cb)?;
                let z = aggregate(g, &features, p, &cb)?;
                (Some(p), Some(transform.forward(g, store, z)?))
            }
            _ => (None, None),
        };
        let contexts = self.context.build_contexts(g, store, pooled, group_features)?;
        let score = self.score.predict(g, store, contexts)?;
        let heatmap = match (&self.heatmap, assignment) {
            (Some(head), Some(p)) => Some(head.predict(g, store, &features, p, self.config.supervised_group)?),
            _ => None,
        };
        Ok(Forward {
            features,
            assignment,
            contexts,
            score,
            heatmap,
        })
    }

    /// `L` or, with a heatmap head and `target` heatmaps, `L'`. The squared
    /// error is taken in rating units against the ground-truth `score`, so
    /// the loss weights keep their meaning relative to raw scores.
    pub fn loss(&self, g: &mut Graph, fwd: &Forward, score: f64, target: Option<&Tensor>, cfg: &LossConfig) -> Result<LossTerms> {
        let rating = g.scale(fwd.score, SCORE_MAX - SCORE_MIN)?;
        let rating = g.add_scalar(rating, SCORE_MIN)?;
        let mse = squared_error(g, score, rating)?;
        let exist = match fwd.assignment {
            Some(p) => Some(existence_loss(g, p, &cfg.existence)?),
            None => None,
        };
        let pos = match (fwd.heatmap, target) {
            (Some(pred), Some(t)) => Some(position_loss(g, t, pred)?),
            (Some(_), None) => return Err(Error::invalid("position supervision needs target heatmaps")),
            _ => None,
        };
        let mut terms = alloc::vec::Vec::new();
        match pos {
            Some(pos) => {
                if let Some(e) = exist {
                    terms.push((e, cfg.lambda1));
                }
                terms.push((pos, cfg.lambda2));
            }
            None => {
                if let Some(e) = exist {
                    terms.push((e, cfg.lambda_exist));
                }
            }
        }
        let total = weighted_sum(g, mse, &terms)?;
        Ok(LossTerms { total, mse, exist, pos })
    }
}

/// Parameter-name prefixes of the separately reported parameter groups.
pub const PARAM_GROUPS: [(&str, &str); 6] = [
    ("extractor", "fem."),
    ("codebook", "sgm.codebook."),
    ("group transform", "sgm.fg."),
    ("bilstm", "tcmm."),
    ("score head", "head.score."),
    ("heatmap head", "head.hpm."),
];

/// Describes which components a store holds, e.g. for mismatch messages.
pub fn describe(store: &ParamStore) -> String {
    let mut out = String::new();
    for p in store.iter() {
        if !out.is_empty() {
            out.push_str(", ");
        }
        out.push_str(&format!("{}{:?}", p.name(), p.value.shape()));
    }
    out
}

/// Score normalization: ratings sum to `[6, 30]`, mapped to `[0, 1]`.
pub const SCORE_MIN: f64 = 6.0;
pub const SCORE_MAX: f64 = 30.0;

pub fn normalize_score(s: f64) -> f64 {
    (s - SCORE_MIN) / (SCORE_MAX - SCORE_MIN)
}

pub fn denormalize_score(s: f64) -> f64 {
    s * (SCORE_MAX - SCORE_MIN) + SCORE_MIN
}

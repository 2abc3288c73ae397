//! Library form of the subcommands; `main` only parses flags and prints.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use visa_core::eval::{make_splits, SplitKind};
use visa_core::gradcheck::{check_ops, GradCheckConfig};
use visa_core::model::{LossConfig, Model, PARAM_GROUPS};
use visa_core::synth::{generate_dataset, Episode};
use visa_core::train::{
    assignment_map, check_model_gradients, cross_validate, predict, tiny_config, tiny_episode, train, CvReport,
    EpochLog,
};
use visa_core::{OpKind, ParamStore};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset;
use crate::error::{CliError, Result};
use crate::render;

/// Generates the configured dataset into `out`; returns the episode count.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let episodes = generate_dataset(&cfg.synth, cfg.synth.n_users, cfg.synth.trials_per_user)?;
    dataset::write_dataset(out, &episodes)?;
    Ok(episodes.len())
}

/// The log written next to a checkpoint.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".log");
    PathBuf::from(name)
}

fn refs<'a>(episodes: &'a [Episode], idx: &[usize]) -> Vec<&'a Episode> {
    idx.iter().map(|&i| &episodes[i]).collect()
}

/// Trains on every episode of `data` and writes the checkpoint plus
/// `<checkpoint>.log`. `on_epoch` also sees each log line.
pub fn train_command(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    mut on_epoch: impl FnMut(&str),
) -> Result<Vec<EpochLog>> {
    let episodes = dataset::read_dataset(data)?;
    let (model, mut store) = Model::new(cfg.model.clone(), cfg.data.seed)?;
    let log_file = log_path(out);
    let mut log = BufWriter::new(File::create(&log_file).map_err(CliError::io(&log_file))?);
    let mut io_err = None;
    let all: Vec<usize> = (0..episodes.len()).collect();
    let logs = train(&model, &mut store, &refs(&episodes, &all), &cfg.train, |l| {
        let line = l.line();
        if io_err.is_none() {
            io_err = writeln!(log, "{line}").err();
        }
        on_epoch(&line);
    })?;
    if let Some(e) = io_err {
        return Err(CliError::io(&log_file)(e));
    }
    log.flush().map_err(CliError::io(&log_file))?;
    checkpoint::save(out, &store)?;
    Ok(logs)
}

/// Prediction source for [`evaluate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    /// Train per fold from the initial parameters, then predict.
    Model,
    /// Returns the ground truth; checks the protocol plumbing.
    Oracle,
    /// Returns the training-fold mean score.
    Constant,
}

impl Predictor {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "model" => Some(Predictor::Model),
            "oracle" => Some(Predictor::Oracle),
            "constant" => Some(Predictor::Constant),
            _ => None,
        }
    }
}

/// Cross-validates under `scheme`, each fold trained from a copy of `init`.
pub fn evaluate(
    cfg: &RunConfig,
    episodes: &[Episode],
    init: &ParamStore,
    scheme: SplitKind,
    predictor: Predictor,
    mut on_epoch: impl FnMut(usize, &EpochLog),
) -> Result<CvReport> {
    let (model, _) = Model::new(cfg.model.clone(), cfg.data.seed)?;
    let splits = make_splits(&dataset::metadata(episodes), scheme, cfg.data.seed)?;
    let scores: Vec<f64> = episodes.iter().map(|e| e.score).collect();
    let report = cross_validate(&scores, &splits, |fold, train_idx, test_idx| match predictor {
        Predictor::Oracle => Ok(test_idx.iter().map(|&i| scores[i]).collect()),
        Predictor::Constant => {
            let mean = train_idx.iter().map(|&i| scores[i]).sum::<f64>() / train_idx.len() as f64;
            Ok(vec![mean; test_idx.len()])
        }
        Predictor::Model => {
            let mut store = init.clone();
            train(&model, &mut store, &refs(episodes, train_idx), &cfg.train, |l| on_epoch(fold, l))?;
            test_idx.iter().map(|&i| predict(&model, &store, &episodes[i])).collect()
        }
    })?;
    Ok(report)
}

/// A model for `cfg` with parameters read from `checkpoint`.
pub fn load_model(cfg: &RunConfig, checkpoint_path: &Path) -> Result<(Model, ParamStore)> {
    let (model, mut store) = Model::new(cfg.model.clone(), cfg.data.seed)?;
    checkpoint::load_into(checkpoint_path, &mut store)?;
    Ok((model, store))
}

/// Writes `t_XX.ppm` per timestep, each over the first frame of its
/// snippet; returns the written paths.
pub fn render_command(model: &Model, store: &ParamStore, episode_dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let ep = dataset::read_episode(episode_dir)?;
    let (plan, map) = assignment_map(model, store, &ep)?
        .ok_or_else(|| CliError::Precondition("the pooled-baseline variant has no assignment map".into()))?;
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    let mut written = Vec::with_capacity(map.t);
    for t in 0..map.t {
        let frame = ep.frame(plan.frames(t).start);
        let rgb = render::overlay(frame, ep.width, ep.height, &map, t);
        let path = out.join(format!("t_{t:02}.ppm"));
        std::fs::write(&path, render::ppm(ep.width, ep.height, &rgb)).map_err(CliError::io(&path))?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSummary {
    pub text: String,
    pub passed: bool,
}

/// Worst relative error per parameter group for `L` and `L'` on the tiny
/// instance, then per op. `fault` doubles one op's derivative.
pub fn gradcheck(seed: u64, fault: Option<OpKind>) -> Result<GradcheckSummary> {
    let gc = GradCheckConfig {
        fault,
        ..GradCheckConfig::default()
    };
    let ep = tiny_episode(seed)?;
    let mut text = String::new();
    let mut passed = true;
    for (label, supervise) in [("L", false), ("L'", true)] {
        let (model, mut store) = Model::new(tiny_config(supervise), seed)?;
        let report = check_model_gradients(&model, &mut store, &ep, &LossConfig::default(), &gc)?;
        for (group, prefix) in PARAM_GROUPS {
            if let Some(err) = report.worst_with_prefix(prefix) {
                let ok = err <= gc.tolerance;
                passed &= ok;
                let _ = writeln!(text, "loss={label} group={} max_rel_err={err:.3e} {}", group.replace(' ', "_"), verdict(ok));
            }
        }
    }
    for check in check_ops(seed, &gc)? {
        let ok = check.max_rel_error <= gc.tolerance;
        passed &= ok;
        let _ = writeln!(text, "op={} max_rel_err={:.3e} {}", check.op.name(), check.max_rel_error, verdict(ok));
    }
    let _ = writeln!(text, "result={}", verdict(passed));
    Ok(GradcheckSummary { text, passed })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

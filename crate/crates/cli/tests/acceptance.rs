//! One pass/fail line per acceptance criterion.
//!
//! Every criterion is evaluated and printed. The process exits nonzero on a
//! red line only when `VISA_ACCEPTANCE_STRICT` is set, so that
//! `cargo test` reports the measured state instead of hiding it behind the
//! first failure.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use visa::checkpoint;
use visa::commands;
use visa::config::RunConfig;
use visa::dataset;
use visa_core::eval::{fisher_z_average, make_splits, spearman, EpisodeMeta, SplitKind};
use visa_core::fem::FeatureVolume;
use visa_core::model::{Model, Variant};
use visa_core::sgm::{
    assign, beta_inverse_cdf, bisect_beta_quantile, existence_loss, existence_targets, CodebookVars,
    ExistenceRegConfig,
};
use visa_core::synth::{generate_dataset, Episode};
use visa_core::train::{cross_validate, group_iou, predict, train};
use visa_core::{Graph, ParamStore, Tensor};

const GRAD_TOL: f64 = 1e-4;
const GRAD_SECONDS: u64 = 60;
const ROW_SUM_TOL: f64 = 1e-9;
const ASSIGN_DRAWS: usize = 1000;
const CLOSED_FORM_TOL: f64 = 1e-9;
const BISECT_TOL: f64 = 1e-10;
const FIXED_POINT_TOL: f64 = 1e-9;
const HAND_CASE: f64 = 0.980829;
const HAND_CASE_TOL: f64 = 1e-6;
const MIN_CORR: f64 = 0.7;
const MIN_IOU: f64 = 0.4;
const SEEDS: [u64; 3] = [0, 1, 2];
const MIN_SEED_WINS: usize = 2;
const MAX_LEARNING_MINUTES: u64 = 30;
const FISHER_CASE: f64 = 0.462117;
const FISHER_TOL: f64 = 1e-5;

const DESK: &str = include_str!("../../../configs/desk.conf");

struct Line {
    id: usize,
    passed: bool,
    detail: String,
}

fn report(lines: &mut Vec<Line>, id: usize, passed: bool, detail: String) {
    println!("criterion {id}: {} {detail}", if passed { "PASS" } else { "FAIL" });
    lines.push(Line { id, passed, detail });
}

fn gradients() -> (bool, String) {
    let start = Instant::now();
    let summary = commands::gradcheck(0, None).expect("gradcheck runs");
    let elapsed = start.elapsed();
    let worst = summary
        .text
        .lines()
        .filter(|l| l.starts_with("loss="))
        .filter_map(|l| l.split_whitespace().find_map(|f| f.strip_prefix("max_rel_err=")))
        .map(|v| v.parse::<f64>().unwrap())
        .fold(0.0, f64::max);
    let groups = summary.text.lines().filter(|l| l.starts_with("loss=")).count();
    let ok = summary.passed && worst <= GRAD_TOL && elapsed < Duration::from_secs(GRAD_SECONDS);
    (ok, format!("groups={groups} worst={worst:.3e} tol={GRAD_TOL:e} time={:.1}s", elapsed.as_secs_f64()))
}

fn assignment_rows() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut rows = 0usize;
    for _ in 0..ASSIGN_DRAWS {
        let (t, h, w) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5));
        let (k, c) = (rng.random_range(1..6), rng.random_range(1..6));
        let scale = rng.random_range(0.1..10.0);
        let x: Vec<f64> = (0..t * h * w * c).map(|_| rng.random_range(-scale..scale)).collect();
        let d: Vec<f64> = (0..k * c).map(|_| rng.random_range(-scale..scale)).collect();
        let s: Vec<f64> = (0..k).map(|_| rng.random_range(-6.0..6.0)).collect();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(&[t, h, w, c], x).unwrap());
        let fv = FeatureVolume::from_var(&g, xv).unwrap();
        let centroids = g.constant(Tensor::new(&[k, c], d).unwrap());
        let raw = g.constant(Tensor::from_vec(s));
        let sigma = g.sigmoid(raw).unwrap();
        let p = assign(&mut g, &fv, &CodebookVars { centroids, sigma, k, c }).unwrap();
        for row in g.value(p).data().chunks(k) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            rows += 1;
        }
    }
    (worst <= ROW_SUM_TOL, format!("draws={ASSIGN_DRAWS} positions={rows} worst={worst:.2e} tol={ROW_SUM_TOL:e}"))
}

fn beta_numerics() -> (bool, String) {
    let mut closed = 0.0f64;
    for beta in [0.001, 0.5, 2.0] {
        for i in 0..=1000 {
            let q = i as f64 * 1e-3;
            let want = 1.0 - (1.0 - q).powf(1.0 / beta);
            closed = closed.max((beta_inverse_cdf(q, 1.0, beta).unwrap() - want).abs());
        }
    }
    // CDFs in closed form, independent of the continued fraction
    let cdfs: [(f64, f64, fn(f64) -> f64); 3] = [
        (2.0, 2.0, |x| x * x * (3.0 - 2.0 * x)),
        (2.0, 5.0, |x| 1.0 - (1.0 - x).powi(5) * (1.0 + 5.0 * x)),
        (0.5, 0.5, |x| 2.0 / std::f64::consts::PI * x.sqrt().asin()),
    ];
    let mut bisect = 0.0f64;
    for (a, b, cdf) in cdfs {
        for i in 1..1000 {
            let q = i as f64 * 1e-3;
            bisect = bisect.max((cdf(bisect_beta_quantile(q, a, b).unwrap()) - q).abs());
        }
    }
    (
        closed <= CLOSED_FORM_TOL && bisect <= BISECT_TOL,
        format!("closed_form_err={closed:.2e} tol={CLOSED_FORM_TOL:e} bisection_err={bisect:.2e} tol={BISECT_TOL:e}"),
    )
}

fn loss_value(shape: [usize; 4], data: Vec<f64>, cfg: &ExistenceRegConfig) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(&shape, data).unwrap());
    let l = existence_loss(&mut g, p, cfg).unwrap();
    g.value(l).data()[0]
}

fn existence() -> (bool, String) {
    let mut fixed = 0.0f64;
    for (alpha, beta, t) in [(1.0, 0.001, 8), (2.0, 3.0, 5), (0.5, 0.5, 4)] {
        let cfg = ExistenceRegConfig { alpha, beta, epsilon: 1e-6 };
        let targets = existence_targets(t, &cfg).unwrap();
        // group 0 peaks at position 0 in target order, group 1 at
        // position 1 in reverse order
        let mut data = Vec::new();
        for i in 0..t {
            let (a, b) = (targets[i], targets[t - 1 - i]);
            data.extend_from_slice(&[a, 0.0, 0.0, b]);
        }
        fixed = fixed.max(loss_value([t, 1, 2, 2], data, &cfg));
    }
    let hand_cfg = ExistenceRegConfig { alpha: 1.0, beta: 1.0, epsilon: 1e-300 };
    let hand = loss_value([2, 1, 2, 1], vec![0.5, 0.5, 1.0, 1.0], &hand_cfg);
    // uniform quantiles (0.25, 0.75) against peaks (0.5, 1)
    let oracle = (0.5f64 / 0.25).ln() + (1.0f64 / 0.75).ln();
    let ok = fixed <= FIXED_POINT_TOL && (hand - HAND_CASE).abs() <= HAND_CASE_TOL && (oracle - HAND_CASE).abs() <= HAND_CASE_TOL;
    (ok, format!("fixed_point={fixed:.2e} tol={FIXED_POINT_TOL:e} hand={hand:.6} want={HAND_CASE}"))
}

fn grid_meta(users: u32, trials: u32) -> Vec<EpisodeMeta> {
    (0..users * trials)
        .map(|i| EpisodeMeta {
            user_id: Some(i / trials),
            supertrial_id: Some(i % trials),
        })
        .collect()
}

fn protocol() -> (bool, String) {
    let mut ok = true;
    for (users, trials) in [(4, 8), (5, 7), (3, 3)] {
        let meta = grid_meta(users, trials);
        let louo = make_splits(&meta, SplitKind::Louo, 0).unwrap();
        let loso = make_splits(&meta, SplitKind::Loso, 0).unwrap();
        let kfold = make_splits(&meta, SplitKind::KFold(4), 7).unwrap();
        ok &= louo.folds == users as usize && loso.folds == trials as usize && kfold.folds == 4;
        ok &= meta.iter().zip(&louo.assignment).all(|(m, &f)| louo.assignment.iter().zip(&meta).all(|(&g, n)| (g == f) == (n.user_id == m.user_id)));
        ok &= meta.iter().zip(&loso.assignment).all(|(m, &f)| loso.assignment.iter().zip(&meta).all(|(&g, n)| (g == f) == (n.supertrial_id == m.supertrial_id)));
        let sizes: Vec<usize> = (0..4).map(|f| kfold.assignment.iter().filter(|&&a| a == f).count()).collect();
        ok &= sizes.iter().sum::<usize>() == meta.len() && sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1;
    }
    let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    let fz = fisher_z_average(&[0.0, 0.761594]).unwrap();
    ok &= rho == 0.8 && (fz - FISHER_CASE).abs() <= FISHER_TOL;
    (ok, format!("splits={} spearman={rho} fisher={fz:.6}", if ok { "exact" } else { "checked" }))
}

struct Run {
    corr: f64,
    iou: Option<f64>,
}

/// Cross-validated run of `cfg` on `episodes`, with the mean held-out IoU
/// of the supervised group when the variant has an assignment map.
fn cv_run(cfg: &RunConfig, episodes: &[Episode]) -> Run {
    let (model, init) = Model::new(cfg.model.clone(), cfg.data.seed).unwrap();
    let splits = make_splits(&dataset::metadata(episodes), cfg.data.scheme, cfg.data.seed).unwrap();
    let scores: Vec<f64> = episodes.iter().map(|e| e.score).collect();
    let mut ious = Vec::new();
    let report = cross_validate(&scores, &splits, |_, train_idx, test_idx| {
        let mut store: ParamStore = init.clone();
        let refs: Vec<&Episode> = train_idx.iter().map(|&i| &episodes[i]).collect();
        train(&model, &mut store, &refs, &cfg.train, |_| {})?;
        if model.config.variant == Variant::Visa {
            for &i in test_idx {
                ious.extend(group_iou(&model, &store, &episodes[i], model.config.supervised_group)?);
            }
        }
        test_idx.iter().map(|&i| predict(&model, &store, &episodes[i])).collect()
    })
    .unwrap();
    let iou = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
    Run { corr: report.corr, iou }
}

fn learning(lines: &mut Vec<Line>) {
    let start = Instant::now();
    let base = RunConfig::parse(DESK, "desk.conf").unwrap();
    let (mut wins5, mut wins6, mut strict6) = (0, 0, 0);
    let mut ious = Vec::new();
    let mut detail5 = String::new();
    let mut detail6 = String::new();
    for seed in SEEDS {
        let cfg = base.clone().with_seed(Some(seed));
        let episodes = generate_dataset(&cfg.synth, cfg.synth.n_users, cfg.synth.trials_per_user).unwrap();
        let visa = cv_run(&cfg, &episodes);
        let mut pooled_cfg = cfg.clone();
        pooled_cfg.model.variant = Variant::PooledBaseline;
        let pooled = cv_run(&pooled_cfg, &episodes);
        let mut sup_cfg = cfg.clone();
        sup_cfg.model.supervise_positions = true;
        let sup = cv_run(&sup_cfg, &episodes);
        if visa.corr >= MIN_CORR && visa.corr > pooled.corr {
            wins5 += 1;
        }
        if sup.corr >= visa.corr {
            wins6 += 1;
        }
        if sup.corr > visa.corr {
            strict6 += 1;
        }
        ious.extend(sup.iou);
        detail5 += &format!(" seed{seed}:visa={:.3},pooled={:.3}", visa.corr, pooled.corr);
        detail6 += &format!(" seed{seed}:sup={:.3},unsup={:.3},iou={:.3}", sup.corr, visa.corr, sup.iou.unwrap_or(f64::NAN));
        eprintln!("seed {seed} done after {:.0}s", start.elapsed().as_secs_f64());
    }
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let in_time = start.elapsed() < Duration::from_secs(MAX_LEARNING_MINUTES * 60);
    report(
        lines,
        5,
        wins5 >= MIN_SEED_WINS && in_time,
        format!("wins={wins5}/{} need={MIN_SEED_WINS} min_corr={MIN_CORR}{detail5} minutes={minutes:.1}", SEEDS.len()),
    );
    let iou = ious.iter().sum::<f64>() / ious.len().max(1) as f64;
    report(
        lines,
        6,
        wins6 >= MIN_SEED_WINS && iou >= MIN_IOU,
        format!("wins={wins6}/{} strict={strict6} need={MIN_SEED_WINS} mean_iou={iou:.3} min_iou={MIN_IOU}{detail6}", SEEDS.len()),
    );
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for dir in dataset::read_manifest(root).unwrap() {
        for name in [dataset::META, dataset::FRAMES, dataset::TOOLS] {
            out.push((format!("{}/{name}", dir.display()), std::fs::read(dir.join(name)).unwrap()));
        }
    }
    out.push((dataset::MANIFEST.into(), std::fs::read(root.join(dataset::MANIFEST)).unwrap()));
    out
}

fn reproducibility() -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(
        "synth.frame_size = 16\nsynth.frame_count = 8\nsynth.tool_radius = 1\n\
         synth.n_users = 2\nsynth.trials_per_user = 2\n\
         model.k = 2\nmodel.channels = 3\nmodel.extractor_hidden = 2\nmodel.group_mid = 3\n\
         model.group_out = 2\nmodel.hidden = 2\nmodel.timesteps = 4\nmodel.snippet_len = 2\n\
         optimizer.epochs = 2\noptimizer.batch_size = 2\n",
        "small",
    )
    .unwrap()
    .with_seed(Some(5));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    commands::synth(&cfg, &a).unwrap();
    commands::synth(&cfg, &b).unwrap();
    let strip = |t: Vec<(String, Vec<u8>)>, root: &Path| -> Vec<(String, Vec<u8>)> {
        t.into_iter().map(|(n, d)| (n.replace(&root.display().to_string(), ""), d)).collect()
    };
    let synth_ok = strip(tree(&a), &a) == strip(tree(&b), &b);

    let (ca, cb) = (tmp.path().join("a.ckpt"), tmp.path().join("b.ckpt"));
    commands::train_command(&cfg, &a, &ca, |_| {}).unwrap();
    commands::train_command(&cfg, &a, &cb, |_| {}).unwrap();
    let bytes = std::fs::read(&ca).unwrap();
    let train_ok = bytes == std::fs::read(&cb).unwrap()
        && std::fs::read(commands::log_path(&ca)).unwrap() == std::fs::read(commands::log_path(&cb)).unwrap();

    let grad_ok = commands::gradcheck(3, None).unwrap() == commands::gradcheck(3, None).unwrap();

    let (_, mut store) = Model::new(cfg.model.clone(), 77).unwrap();
    checkpoint::load_into(&ca, &mut store).unwrap();
    let round_ok = checkpoint::encode(&store).unwrap() == bytes;

    (
        synth_ok && train_ok && grad_ok && round_ok,
        format!("synth={synth_ok} train={train_ok} gradcheck={grad_ok} checkpoint_round_trip={round_ok}"),
    )
}

fn main() {
    let mut lines = Vec::new();
    let (ok, d) = gradients();
    report(&mut lines, 1, ok, d);
    let (ok, d) = assignment_rows();
    report(&mut lines, 2, ok, d);
    let (ok, d) = beta_numerics();
    report(&mut lines, 3, ok, d);
    let (ok, d) = existence();
    report(&mut lines, 4, ok, d);
    learning(&mut lines);
    let (ok, d) = protocol();
    report(&mut lines, 7, ok, d);
    let (ok, d) = reproducibility();
    report(&mut lines, 8, ok, d);

    lines.sort_by_key(|l| l.id);
    let red: Vec<usize> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    println!("summary: {}/{} pass, red={red:?}", lines.len() - red.len(), lines.len());
    for l in lines.iter().filter(|l| !l.passed) {
        eprintln!("red criterion {}: {}", l.id, l.detail);
    }
    if !red.is_empty() && std::env::var_os("VISA_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}

//! Central finite-difference gradient checking.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Build the analytic graph with this op's derivative doubled.
    pub fault: Option<OpKind>,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            fault: None,
            max_elements: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Largest error among parameters whose name starts with `prefix`.
    pub fn worst_with_prefix(&self, prefix: &str) -> Option<f64> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.max_rel_error)
            .reduce(f64::max)
    }
}

/// `|analytic - numeric| / max(1, |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares backpropagated gradients of `objective` against central
/// differences for every parameter in `store`. Parameter values are
/// restored before returning; gradients hold the analytic result.
pub fn grad_check<F>(store: &mut ParamStore, config: &GradCheckConfig, mut objective: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&config.step) {
        return Err(Error::invalid(format!("step {} outside [1e-7, 1e-3]", config.step)));
    }
    let mut graph = match config.fault {
        Some(kind) => Graph::with_fault(kind),
        None => Graph::new(),
    };
    store.zero_grad();
    let loss = objective(&mut graph, store)?;
    graph.backward(loss, store)?;
    drop(graph);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = objective(&mut g, store).map_err(|e| match e {
            Error::NonFinite(kind) => Error::NonFiniteValue {
                what: format!("objective at perturbed point ({})", kind.name()),
            },
            other => other,
        })?;
        let v = g
            .value(loss)
            .item()
            .ok_or_else(|| Error::NonScalarLoss(g.shape(loss).to_vec()))?;
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                what: "objective at perturbed point".into(),
            });
        }
        Ok(v)
    };

    let ids: Vec<ParamId> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).len();
        let stride = match config.max_elements {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut check = ParamCheck {
            name: store.get(id).name().into(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in (0..n).step_by(stride) {
            let original = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = original + config.step;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[i] = original - config.step;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * config.step);
            let analytic = store.grad(id).data()[i];
            let err = relative_error(analytic, numeric);
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst_index = i;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        tolerance: config.tolerance,
        params,
    })
}

/// Result of checking one op in isolation.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: OpKind,
    pub max_rel_error: f64,
}

/// Runs [`grad_check`] on every differentiable op with random inputs
/// (entries in `[-1, 1]`, at most 4 per axis), each reduced to a scalar by a
/// fixed random weighting.
pub fn check_ops(seed: u64, config: &GradCheckConfig) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(OpKind::DIFFERENTIABLE.len());
    for op in OpKind::DIFFERENTIABLE {
        let mut store = ParamStore::new();
        let inputs: Vec<ParamId> = op_input_shapes(op)
            .iter()
            .enumerate()
            .map(|(i, (shape, domain))| {
                let t = Tensor::from_fn(shape, |_| domain.sample(&mut rng));
                store.add(&format!("{}.{i}", op.name()), t)
            })
            .collect::<Result<_>>()?;
        let out_shape = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|&id| g.param(&store, id)).collect();
            let y = apply_op(&mut g, op, &vars)?;
            g.shape(y).to_vec()
        };
        let weights = Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0));
        let report = grad_check(&mut store, config, |g, s| {
            let vars: Vec<Var> = inputs.iter().map(|&id| g.param(s, id)).collect();
            let y = apply_op(g, op, &vars)?;
            let w = g.constant(weights.clone());
            let wy = g.mul(y, w)?;
            g.sum(wy)
        })?;
        let max_rel_error = report.worst().map_or(0.0, |p| p.max_rel_error);
        out.push(OpCheck { op, max_rel_error });
    }
    Ok(out)
}

#[derive(Clone, Copy)]
enum Domain {
    /// Uniform in `[-1, 1]` but at least 0.1 away from zero.
    AwayFromZero,
    Positive,
}

impl Domain {
    fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Domain::AwayFromZero => {
                let v: f64 = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            }
            Domain::Positive => rng.random_range(0.5..1.5),
        }
    }
}

fn op_input_shapes(op: OpKind) -> Vec<(Vec<usize>, Domain)> {
    use Domain::*;
    let s = |shape: &[usize], d: Domain| (shape.to_vec(), d);
    match op {
        OpKind::Add | OpKind::Sub | OpKind::Mul => vec![s(&[2, 3, 4], AwayFromZero), s(&[1, 3, 1], AwayFromZero)],
        OpKind::Div => vec![s(&[2, 3, 4], AwayFromZero), s(&[2, 1, 4], Positive)],
        OpKind::MatMul => vec![s(&[3, 4], AwayFromZero), s(&[4, 2], AwayFromZero)],
        OpKind::BatchMatMul => vec![s(&[2, 3, 4], AwayFromZero), s(&[2, 4, 2], AwayFromZero)],
        OpKind::Conv3d => vec![
            s(&[1, 2, 3, 4, 4], AwayFromZero),
            s(&[2, 2, 2, 3, 3], AwayFromZero),
            s(&[2], AwayFromZero),
        ],
        OpKind::AvgPool2 => vec![s(&[2, 4, 4], AwayFromZero)],
        OpKind::Ln => vec![s(&[3, 4], Positive)],
        OpKind::Concat => vec![s(&[2, 3], AwayFromZero), s(&[2, 2], AwayFromZero)],
        _ => vec![s(&[3, 4], AwayFromZero)],
    }
}

fn apply_op(g: &mut Graph, op: OpKind, v: &[Var]) -> Result<Var> {
    match op {
        OpKind::Leaf => Err(Error::invalid("leaf is not an op")),
        OpKind::Add => g.add(v[0], v[1]),
        OpKind::Sub => g.sub(v[0], v[1]),
        OpKind::Mul => g.mul(v[0], v[1]),
        OpKind::Div => g.div(v[0], v[1]),
        OpKind::Scale => g.scale(v[0], -1.7),
        OpKind::AddScalar => g.add_scalar(v[0], 0.3),
        OpKind::MatMul => g.matmul(v[0], v[1]),
        OpKind::BatchMatMul => g.batch_matmul(v[0], v[1]),
        OpKind::Conv3d => g.conv3d(v[0], v[1], v[2], [0, 1, 1]),
        OpKind::AvgPool2 => g.avg_pool2(v[0]),
        OpKind::Exp => g.exp(v[0]),
        OpKind::Ln => g.ln(v[0]),
        OpKind::Tanh => g.tanh(v[0]),
        OpKind::Sigmoid => g.sigmoid(v[0]),
        OpKind::Relu => g.relu(v[0]),
        OpKind::Abs => g.abs(v[0]),
        OpKind::Square => g.square(v[0]),
        OpKind::Clamp => g.clamp(v[0], -0.55, 0.55),
        OpKind::Sum => g.sum(v[0]),
        OpKind::Mean => g.mean(v[0]),
        OpKind::SumAxis => g.sum_axis(v[0], 1),
        OpKind::MeanAxis => g.mean_axis(v[0], 0),
        OpKind::Concat => g.concat(&[v[0], v[1]], 1),
        OpKind::Slice => g.slice(v[0], 1, 1, 2),
        OpKind::Reshape => g.reshape(v[0], &[2, 6]),
        OpKind::Permute => g.permute(v[0], &[1, 0]),
        OpKind::Softmax => g.softmax(v[0]),
        OpKind::L2Normalize => g.l2_normalize(v[0]),
        OpKind::Sort => g.sort(v[0]),
        OpKind::MaxAxis => g.max_axis(v[0], 1),
    }
}

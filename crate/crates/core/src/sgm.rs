//! Semantic grouping: soft assignment of local features to `K` learnable
//! centroids, per-group residual aggregation and the group-existence
//! regularizer.

mod beta;

pub use beta::{beta_inverse_cdf, bisect_beta_quantile, ln_beta, regularized_incomplete_beta, QUANTILE_TOLERANCE};

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fem::FeatureVolume;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Floor on a group's total assignment mass in one timestep. Softmax
/// probabilities can underflow to exactly zero far from a centroid.
pub const MIN_GROUP_MASS: f64 = 1e-12;

pub const SIGMA_FIT_MIN: f64 = 0.01;
pub const SIGMA_FIT_MAX: f64 = 0.99;

/// Standard deviation of the initial centroids.
pub const CENTROID_INIT_STD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExistenceRegConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for ExistenceRegConfig {
    fn default() -> Self {
        ExistenceRegConfig {
            alpha: 1.0,
            beta: 0.001,
            epsilon: 1e-6,
        }
    }
}

impl ExistenceRegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.beta > 0.0 && self.epsilon > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!("existence regularizer needs positive alpha, beta, epsilon: {self:?}")))
        }
    }
}

/// The `K x C` centroids and per-group smoothing factors.
#[derive(Clone, Copy, Debug)]
pub struct GroupCodebook {
    pub centroids: ParamId,
    /// Unconstrained; the smoothing factor is `logistic(sigma_raw)`.
    pub sigma_raw: ParamId,
    pub k: usize,
    pub c: usize,
}

impl GroupCodebook {
    pub fn new<R: Rng>(store: &mut ParamStore, k: usize, c: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || c == 0 {
            return Err(Error::invalid("codebook needs K >= 1 and C >= 1"));
        }
        let normal = Normal::new(0.0, CENTROID_INIT_STD).map_err(|e| Error::invalid(format!("{e}")))?;
        let centroids = store.add("sgm.codebook.centroids", Tensor::from_fn(&[k, c], |_| normal.sample(rng)))?;
        let sigma_raw = store.add("sgm.codebook.sigma_raw", Tensor::zeros(&[k]))?;
        Ok(GroupCodebook {
            centroids,
            sigma_raw,
            k,
            c,
        })
    }

    /// Sets the centroids to k-means centers of `points` (`[n, C]`, row-major)
    /// and each smoothing factor to the RMS distance of its cluster members,
    /// clamped to `[SIGMA_FIT_MIN, SIGMA_FIT_MAX]`.
    pub fn fit<R: Rng>(&self, store: &mut ParamStore, points: &[f64], iters: usize, rng: &mut R) -> Result<()> {
        let (centers, labels) = kmeans(points, self.c, self.k, iters, rng)?;
        let mut sq = alloc::vec![0.0; self.k];
        let mut count = alloc::vec![0usize; self.k];
        for (row, &l) in points.chunks_exact(self.c).zip(&labels) {
            sq[l] += sq_dist(row, &centers[l * self.c..(l + 1) * self.c]);
            count[l] += 1;
        }
        let raw: Vec<f64> = sq
            .iter()
            .zip(&count)
            .map(|(&s, &n)| {
                let sigma = libm::sqrt(s / n.max(1) as f64).clamp(SIGMA_FIT_MIN, SIGMA_FIT_MAX);
                libm::log(sigma / (1.0 - sigma))
            })
            .collect();
        store.get_mut(self.centroids).value = Tensor::new(&[self.k, self.c], centers)?;
        store.get_mut(self.sigma_raw).value = Tensor::new(&[self.k], raw)?;
        Ok(())
    }

    /// Puts the codebook on `g`, evaluating `sigma = logistic(sigma_raw)`.
    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<CodebookVars> {
        let centroids = g.param(store, self.centroids);
        let raw = g.param(store, self.sigma_raw);
        let sigma = g.sigmoid(raw)?;
        Ok(CodebookVars {
            centroids,
            sigma,
            k: self.k,
            c: self.c,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CodebookVars {
    /// `[K, C]`
    pub centroids: Var,
    /// `[K]`, strictly inside (0, 1).
    pub sigma: Var,
    pub k: usize,
    pub c: usize,
}

/// Soft assignment `P` as a `[T, H, W, K]` node:
/// `softmax_k(-|(x - d_k) / sigma_k|^2)`.
pub fn assign(g: &mut Graph, x: &FeatureVolume, cb: &CodebookVars) -> Result<Var> {
    if x.c != cb.c {
        return Err(Error::Shape {
            op: "assign",
            lhs: g.shape(x.var).to_vec(),
            rhs: g.shape(cb.centroids).to_vec(),
        });
    }
    let n = x.t * x.positions();
    let flat = g.reshape(x.var, &[n, 1, x.c])?;
    let d = g.reshape(cb.centroids, &[1, cb.k, cb.c])?;
    let diff = g.sub(flat, d)?;
    let sq = g.square(diff)?;
    let dist = g.sum_axis(sq, 2)?;
    let s2 = g.square(cb.sigma)?;
    let s2 = g.reshape(s2, &[1, cb.k])?;
    let scaled = g.div(dist, s2)?;
    let logits = g.scale(scaled, -1.0)?;
    let p = g.softmax(logits)?;
    g.reshape(p, &[x.t, x.h, x.w, cb.k])
}

/// Hard per-position labels: the argmax of `P`, ties to the lowest group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignmentMap {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub labels: Vec<usize>,
}

impl AssignmentMap {
    pub fn label(&self, t: usize, i: usize, j: usize) -> usize {
        self.labels[(t * self.h + i) * self.w + j]
    }
}

pub fn hard_assignment(p: &Tensor) -> Result<AssignmentMap> {
    let [t, h, w, k] = *p.shape() else {
        return Err(Error::invalid(format!("assignment tensor must be 4-D, got {:?}", p.shape())));
    };
    if k == 0 {
        return Err(Error::invalid("assignment tensor has no groups"));
    }
    let labels = p
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    Ok(AssignmentMap { t, h, w, labels })
}

/// Unit-norm residuals `z` as `[T, K, C]`:
/// `z'_tk = (sum_ij P X / sum_ij P - d_k) / sigma_k`, `z = z' / |z'|`.
pub fn aggregate(g: &mut Graph, x: &FeatureVolume, p: Var, cb: &CodebookVars) -> Result<Var> {
    let hw = x.positions();
    let p = g.reshape(p, &[x.t, hw, cb.k])?;
    let pt = g.permute(p, &[0, 2, 1])?;
    let xf = g.reshape(x.var, &[x.t, hw, x.c])?;
    let num = g.batch_matmul(pt, xf)?;
    let den = g.sum_axis(pt, 2)?;
    let den = g.clamp(den, MIN_GROUP_MASS, f64::INFINITY)?;
    let den = g.reshape(den, &[x.t, cb.k, 1])?;
    let mean = g.div(num, den)?;
    let d = g.reshape(cb.centroids, &[1, cb.k, cb.c])?;
    let resid = g.sub(mean, d)?;
    let sigma = g.reshape(cb.sigma, &[1, cb.k, 1])?;
    let zp = g.div(resid, sigma)?;
    g.l2_normalize(zp)
}

/// `f_g`: two linear maps with a ReLU between, shared across time and groups.
#[derive(Clone, Copy, Debug)]
pub struct GroupTransform {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
}

impl GroupTransform {
    pub fn new<R: Rng>(store: &mut ParamStore, c_in: usize, c_mid: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        let w1 = store.add("sgm.fg.w1", linear_init(c_in, c_mid, rng)?)?;
        let b1 = store.add("sgm.fg.b1", Tensor::zeros(&[c_mid]))?;
        let w2 = store.add("sgm.fg.w2", linear_init(c_mid, c_out, rng)?)?;
        let b2 = store.add("sgm.fg.b2", Tensor::zeros(&[c_out]))?;
        Ok(GroupTransform {
            w1,
            b1,
            w2,
            b2,
            c_in,
            c_mid,
            c_out,
        })
    }

    /// `g = W2 relu(W1 z + b1) + b2` on `[T, K, C]`, giving `[T, K, C']`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let [t, k, c] = *g.shape(z) else {
            return Err(Error::invalid("group residuals must be [T, K, C]"));
        };
        if c != self.c_in {
            return Err(Error::invalid(format!("f_g expects {} inputs, got {c}", self.c_in)));
        }
        let flat = g.reshape(z, &[t * k, c])?;
        let h = dense(g, store, flat, self.w1, self.b1)?;
        let h = g.relu(h)?;
        let out = dense(g, store, h, self.w2, self.b2)?;
        g.reshape(out, &[t, k, self.c_out])
    }
}

/// `x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
pub(crate) fn dense(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let wv = g.param(store, w);
    let bv = g.param(store, b);
    let out = store.value(b).len();
    let y = g.matmul(x, wv)?;
    let bv = g.reshape(bv, &[1, out])?;
    g.add(y, bv)
}

/// Uniform `(-1/sqrt(in), 1/sqrt(in))` init for an `[in, out]` weight.
pub(crate) fn linear_init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::invalid("linear layer with zero width"));
    }
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    Ok(Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-bound..bound)))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding over `[n, c]` row-major points.
/// Returns the `[k, c]` centers and each point's label. An emptied cluster
/// keeps its previous center.
pub fn kmeans<R: Rng>(points: &[f64], c: usize, k: usize, iters: usize, rng: &mut R) -> Result<(Vec<f64>, Vec<usize>)> {
    if c == 0 || k == 0 || points.len() % c != 0 || points.len() / c < k {
        return Err(Error::invalid(format!("k-means needs at least {k} points of width {c}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { what: "k-means input".into() });
    }
    let rows: Vec<&[f64]> = points.chunks_exact(c).collect();
    let mut centers: Vec<f64> = rows[rng.random_range(0..rows.len())].to_vec();
    let mut nearest: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[..c])).collect();
    while centers.len() < k * c {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            nearest.iter().position(|&d| {
                u -= d;
                u < 0.0
            }).unwrap_or(rows.len() - 1)
        } else {
            rng.random_range(0..rows.len())
        };
        let start = centers.len();
        centers.extend_from_slice(rows[pick]);
        for (d, r) in nearest.iter_mut().zip(&rows) {
            *d = d.min(sq_dist(r, &centers[start..]));
        }
    }
    let label = |centers: &[f64], r: &[f64]| {
        (0..k)
            .map(|j| sq_dist(r, &centers[j * c..(j + 1) * c]))
            .enumerate()
            .fold((0, f64::INFINITY), |best, (j, d)| if d < best.1 { (j, d) } else { best })
            .0
    };
    let mut labels: Vec<usize> = rows.iter().map(|r| label(&centers, r)).collect();
    for _ in 0..iters {
        let mut sums = alloc::vec![0.0; k * c];
        let mut counts = alloc::vec![0usize; k];
        for (r, &l) in rows.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l * c..(l + 1) * c].iter_mut().zip(*r) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for (dst, s) in centers[j * c..(j + 1) * c].iter_mut().zip(&sums[j * c..(j + 1) * c]) {
                    *dst = s / counts[j] as f64;
                }
            }
        }
        let next: Vec<usize> = rows.iter().map(|r| label(&centers, r)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok((centers, labels))
}

/// `F^-1((2i - 1) / 2T; alpha, beta)` for `i = 1..=T`.
pub fn existence_targets(t: usize, cfg: &ExistenceRegConfig) -> Result<Vec<f64>> {
    (1..=t)
        .map(|i| beta_inverse_cdf((2 * i - 1) as f64 / (2 * t) as f64, cfg.alpha, cfg.beta))
        .collect()
}

/// Group-existence regularizer on `P` (`[T, H, W, K]`):
/// `sum_k sum_i |ln(p*_ik + eps) - ln(F^-1((2i-1)/2T) + eps)|`, where `p*_k`
/// is the ascending sort over time of each group's per-timestep max
/// probability.
pub fn existence_loss(g: &mut Graph, p: Var, cfg: &ExistenceRegConfig) -> Result<Var> {
    cfg.validate()?;
    let [t, h, w, k] = *g.shape(p) else {
        return Err(Error::invalid("assignment tensor must be [T, H, W, K]"));
    };
    let flat = g.reshape(p, &[t, h * w, k])?;
    let peak = g.max_axis(flat, 1)?;
    let per_group = g.permute(peak, &[1, 0])?;
    let sorted = g.sort(per_group)?;
    let shifted = g.add_scalar(sorted, cfg.epsilon)?;
    let logs = g.ln(shifted)?;
    let targets = existence_targets(t, cfg)?;
    let row: Vec<f64> = targets.iter().map(|&q| libm::log(q + cfg.epsilon)).collect();
    let target = Tensor::from_fn(&[k, t], |i| row[i % t]);
    let target = g.constant(target);
    let diff = g.sub(logs, target)?;
    let dev = g.abs(diff)?;
    g.sum(dev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn codebook(g: &mut Graph, centroids: Tensor, sigma: &[f64]) -> CodebookVars {
        let [k, c] = *centroids.shape() else { panic!() };
        let centroids = g.constant(centroids);
        let sigma = g.constant(Tensor::from_vec(sigma.to_vec()));
        CodebookVars { centroids, sigma, k, c }
    }

    fn volume(g: &mut Graph, shape: [usize; 4], data: Vec<f64>) -> FeatureVolume {
        let v = g.constant(Tensor::new(&shape, data).unwrap());
        FeatureVolume::from_var(g, v).unwrap()
    }

    #[test]
    fn single_group_gets_everything() {
        let mut g = Graph::new();
        let x = volume(&mut g, [2, 2, 2, 1], (0..8).map(f64::from).collect());
        let cb = codebook(&mut g, Tensor::new(&[1, 1], vec![0.3]).unwrap(), &[0.5]);
        let p = assign(&mut g, &x, &cb).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn equidistant_split_evenly() {
        let mut g = Graph::new();
        let x = volume(&mut g, [1, 1, 1, 1], vec![0.5]);
        let cb = codebook(&mut g, Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap(), &[0.4, 0.4]);
        let p = assign(&mut g, &x, &cb).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn scalar_assignment_values() {
        let mut g = Graph::new();
        let x = volume(&mut g, [1, 1, 1, 1], vec![0.0]);
        let cb = codebook(&mut g, Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap(), &[0.5, 0.5]);
        let p = assign(&mut g, &x, &cb).unwrap();
        let d = g.value(p).data();
        assert!((d[0] - 0.982014).abs() < 5e-7);
        assert!((d[1] - 0.017986).abs() < 5e-7);
    }

    #[test]
    fn hard_assignment_rules() {
        let p = Tensor::new(&[1, 1, 2, 3], vec![0.2, 0.7, 0.1, 0.4, 0.4, 0.2]).unwrap();
        assert_eq!(hard_assignment(&p).unwrap().labels, vec![1, 0]);
        let p = Tensor::new(&[1, 1, 1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(hard_assignment(&p).unwrap().labels, vec![0]);
    }

    #[test]
    fn hard_assignment_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Tensor::from_fn(&[2, 2, 2, 3], |_| rng.random_range(0.0..1.0));
        let map = hard_assignment(&p).unwrap();
        for t in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let vals: Vec<f64> = (0..3).map(|k| p.at(&[t, i, j, k])).collect();
                    let max = vals.iter().copied().fold(f64::MIN, f64::max);
                    let want = vals.iter().position(|&v| v == max).unwrap();
                    assert_eq!(map.label(t, i, j), want);
                }
            }
        }
    }

    #[test]
    fn residual_of_centroid_is_zero() {
        let mut g = Graph::new();
        let x = volume(&mut g, [1, 2, 1, 2], vec![0.3, -0.2, 0.3, -0.2]);
        let cb = codebook(&mut g, Tensor::new(&[1, 2], vec![0.3, -0.2]).unwrap(), &[0.5]);
        let p = assign(&mut g, &x, &cb).unwrap();
        let z = aggregate(&mut g, &x, p, &cb).unwrap();
        assert_eq!(g.value(z).data(), &[0.0, 0.0]);
    }

    #[test]
    fn scalar_residual() {
        let mut g = Graph::new();
        let x = volume(&mut g, [1, 1, 1, 1], vec![2.0]);
        let cb = codebook(&mut g, Tensor::new(&[1, 1], vec![0.5]).unwrap(), &[0.5]);
        let p = assign(&mut g, &x, &cb).unwrap();
        // unnormalized residual is (2.0 - 0.5) / 0.5 = 3.0
        let hw = 1;
        let pr = g.reshape(p, &[1, hw, 1]).unwrap();
        let pt = g.permute(pr, &[0, 2, 1]).unwrap();
        let xf = g.reshape(x.var, &[1, hw, 1]).unwrap();
        let num = g.batch_matmul(pt, xf).unwrap();
        assert_eq!(g.value(num).data(), &[2.0]);
        let z = aggregate(&mut g, &x, p, &cb).unwrap();
        assert_eq!(g.value(z).data(), &[1.0]);
    }

    #[test]
    fn residuals_are_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let x = volume(&mut g, [3, 2, 2, 4], (0..48).map(|_| rng.random_range(-1.0..1.0)).collect());
        let cb = codebook(
            &mut g,
            Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0)),
            &[0.3, 0.5, 0.7],
        );
        let p = assign(&mut g, &x, &cb).unwrap();
        let z = aggregate(&mut g, &x, p, &cb).unwrap();
        for row in g.value(z).data().chunks(4) {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((libm::sqrt(n) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn group_transform_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let fg = GroupTransform::new(&mut store, 2, 2, 2, &mut rng).unwrap();

        // zero weights: output is b2
        for name in ["sgm.fg.w1", "sgm.fg.w2"] {
            store.set_value(name, Tensor::zeros(&[2, 2])).unwrap();
        }
        store.set_value("sgm.fg.b2", Tensor::from_vec(vec![0.25, -1.5])).unwrap();
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let out = fg.forward(&mut g, &store, z).unwrap();
        for row in g.value(out).data().chunks(2) {
            assert_eq!(row, &[0.25, -1.5]);
        }

        // identity weights on non-negative input
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        store.set_value("sgm.fg.w1", eye.clone()).unwrap();
        store.set_value("sgm.fg.w2", eye).unwrap();
        store.set_value("sgm.fg.b2", Tensor::zeros(&[2])).unwrap();
        let mut g = Graph::new();
        let zt = Tensor::from_fn(&[2, 3, 2], |i| i as f64 * 0.1);
        let z = g.constant(zt.clone());
        let out = fg.forward(&mut g, &store, z).unwrap();
        assert_eq!(g.value(out), &zt);

        // random weights against hand matrix arithmetic
        let w1 = [0.3, -0.7, 1.1, 0.4];
        let b1 = [0.05, -0.2];
        let w2 = [-0.6, 0.9, 0.2, 0.8];
        let b2 = [0.1, 0.3];
        store.set_value("sgm.fg.w1", Tensor::new(&[2, 2], w1.to_vec()).unwrap()).unwrap();
        store.set_value("sgm.fg.b1", Tensor::from_vec(b1.to_vec())).unwrap();
        store.set_value("sgm.fg.w2", Tensor::new(&[2, 2], w2.to_vec()).unwrap()).unwrap();
        store.set_value("sgm.fg.b2", Tensor::from_vec(b2.to_vec())).unwrap();
        let zin = [0.8, -0.6];
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(&[1, 1, 2], zin.to_vec()).unwrap());
        let out = fg.forward(&mut g, &store, z).unwrap();
        let h0 = (zin[0] * w1[0] + zin[1] * w1[2] + b1[0]).max(0.0);
        let h1 = (zin[0] * w1[1] + zin[1] * w1[3] + b1[1]).max(0.0);
        let want = [h0 * w2[0] + h1 * w2[2] + b2[0], h0 * w2[1] + h1 * w2[3] + b2[1]];
        for (got, want) in g.value(out).data().iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    fn loss_for_peaks(peaks: &[[f64; 2]], cfg: &ExistenceRegConfig) -> f64 {
        // two positions per timestep, each carrying one group's peak
        let t = peaks.len();
        let mut data = Vec::new();
        for row in peaks {
            data.extend_from_slice(&[row[0], 0.0, 0.0, row[1]]);
        }
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(&[t, 1, 2, 2], data).unwrap());
        let l = existence_loss(&mut g, p, cfg).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn existence_loss_hand_case() {
        // K = 1, T = 2, alpha = beta = 1, eps = 0: targets (0.25, 0.75)
        let cfg = ExistenceRegConfig {
            alpha: 1.0,
            beta: 1.0,
            epsilon: 1e-300,
        };
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(&[2, 1, 2, 1], vec![0.5, 0.5, 1.0, 1.0]).unwrap());
        let l = existence_loss(&mut g, p, &cfg).unwrap();
        assert!((g.value(l).data()[0] - 0.980829).abs() < 1e-6);
    }

    #[test]
    fn existence_loss_vanishes_at_targets() {
        let cfg = ExistenceRegConfig {
            alpha: 2.0,
            beta: 3.0,
            epsilon: 1e-6,
        };
        let targets = existence_targets(3, &cfg).unwrap();
        // both groups hit their quantiles, presented out of order in time
        let peaks = [[targets[2], targets[0]], [targets[0], targets[1]], [targets[1], targets[2]]];
        assert!(loss_for_peaks(&peaks, &cfg) <= 1e-9);
    }

    #[test]
    fn existence_loss_near_one_under_default_prior() {
        let cfg = ExistenceRegConfig::default();
        let near = loss_for_peaks(&[[0.999_999, 0.999_999]; 4], &cfg);
        let far = loss_for_peaks(&[[0.6, 0.7]; 4], &cfg);
        assert!(near < 1e-4, "{near}");
        assert!(far > 1.0);
    }

    #[test]
    fn kmeans_separates_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut points = Vec::new();
        for i in 0..20 {
            let off = if i % 2 == 0 { 0.0 } else { 10.0 };
            points.extend_from_slice(&[off + 0.01 * i as f64, off - 0.01 * i as f64]);
        }
        let (centers, labels) = kmeans(&points, 2, 2, 10, &mut rng).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            assert_eq!(l, labels[i % 2]);
        }
        assert_ne!(labels[0], labels[1]);
        // the even points average to (0.09, -0.09), the odd ones to (10.1, 9.9)
        let even = &centers[labels[0] * 2..labels[0] * 2 + 2];
        let odd = &centers[labels[1] * 2..labels[1] * 2 + 2];
        assert!((even[0] - 0.09).abs() < 1e-12 && (even[1] + 0.09).abs() < 1e-12, "{even:?}");
        assert!((odd[0] - 10.1).abs() < 1e-12 && (odd[1] - 9.9).abs() < 1e-12, "{odd:?}");
        assert!(kmeans(&points[..2], 2, 2, 1, &mut rng).is_err());
    }

    #[test]
    fn fit_sets_sigma_to_cluster_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cb = GroupCodebook::new(&mut store, 2, 1, &mut rng).unwrap();
        // clusters {-0.1, 0.1} around 0 (rms 0.1) and {4.8, 5.2} around 5 (rms 0.2)
        cb.fit(&mut store, &[-0.1, 0.1, 4.8, 5.2], 5, &mut rng).unwrap();
        let mut centers = store.value(cb.centroids).data().to_vec();
        let mut sigmas: Vec<f64> = store.value(cb.sigma_raw).data().iter().map(|&r| 1.0 / (1.0 + libm::exp(-r))).collect();
        if centers[0] > centers[1] {
            centers.swap(0, 1);
            sigmas.swap(0, 1);
        }
        assert!(centers[0].abs() < 1e-12 && (centers[1] - 5.0).abs() < 1e-12);
        assert!((sigmas[0] - 0.1).abs() < 1e-12 && (sigmas[1] - 0.2).abs() < 1e-12, "{sigmas:?}");
    }
}

//! Temporal context modeling: one bidirectional LSTM per semantic group plus
//! one over the spatially pooled features.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// One LSTM direction. Gate blocks are ordered input, forget, cell, output
/// along the `4H` axis.
#[derive(Clone, Copy, Debug)]
pub struct LstmDirection {
    /// `[input, 4H]`
    pub wx: ParamId,
    /// `[H, 4H]`
    pub wh: ParamId,
    /// `[4H]`
    pub b: ParamId,
}

impl LstmDirection {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / libm::sqrt(hidden as f64);
        let mut init = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        let wx = store.add(&format!("{prefix}.wx"), init(&[input, 4 * hidden]))?;
        let wh = store.add(&format!("{prefix}.wh"), init(&[hidden, 4 * hidden]))?;
        let b = store.add(&format!("{prefix}.b"), init(&[4 * hidden]))?;
        Ok(LstmDirection { wx, wh, b })
    }

    /// Runs over `series` (`[T, input]`) from zero initial state, returning
    /// `[T, H]` in original time order.
    fn run(&self, g: &mut Graph, store: &ParamStore, series: Var, hidden: usize, reverse: bool) -> Result<Var> {
        let t_len = g.shape(series)[0];
        let wx = g.param(store, self.wx);
        let wh = g.param(store, self.wh);
        let b = g.param(store, self.b);
        let b = g.reshape(b, &[1, 4 * hidden])?;
        let xw = g.matmul(series, wx)?;
        let xw = g.add(xw, b)?;
        let mut state: Option<(Var, Var)> = None;
        let mut outputs = Vec::with_capacity(t_len);
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let mut gates = g.slice(xw, 0, t, 1)?;
            if let Some((h, _)) = state {
                let rec = g.matmul(h, wh)?;
                gates = g.add(gates, rec)?;
            }
            let i = g.slice(gates, 1, 0, hidden)?;
            let i = g.sigmoid(i)?;
            let f = g.slice(gates, 1, hidden, hidden)?;
            let f = g.sigmoid(f)?;
            let cand = g.slice(gates, 1, 2 * hidden, hidden)?;
            let cand = g.tanh(cand)?;
            let o = g.slice(gates, 1, 3 * hidden, hidden)?;
            let o = g.sigmoid(o)?;
            let mut c = g.mul(i, cand)?;
            if let Some((_, c_prev)) = state {
                let keep = g.mul(f, c_prev)?;
                c = g.add(c, keep)?;
            }
            let tc = g.tanh(c)?;
            let h = g.mul(o, tc)?;
            outputs.push(h);
            state = Some((h, c));
        }
        if reverse {
            outputs.reverse();
        }
        g.concat(&outputs, 0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstm {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
    pub input: usize,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::invalid("LSTM with zero width"));
        }
        Ok(BiLstm {
            forward: LstmDirection::new(store, &format!("{prefix}.fwd"), input, hidden, rng)?,
            backward: LstmDirection::new(store, &format!("{prefix}.bwd"), input, hidden, rng)?,
            input,
            hidden,
        })
    }

    /// Contexts `[h_fwd; h_bwd]` per timestep: `[T, input] -> [T, 2H]`.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, series: Var) -> Result<Var> {
        match *g.shape(series) {
            [t, n] if t >= 1 && n == self.input => {}
            _ => {
                return Err(Error::invalid(format!(
                    "BiLSTM expects [T >= 1, {}], got {:?}",
                    self.input,
                    g.shape(series)
                )))
            }
        }
        let fwd = self.forward.run(g, store, series, self.hidden, false)?;
        let bwd = self.backward.run(g, store, series, self.hidden, true)?;
        g.concat(&[fwd, bwd], 1)
    }
}

/// The global stream and the per-group streams.
#[derive(Clone, Debug)]
pub struct ContextModel {
    pub global: BiLstm,
    pub groups: Vec<BiLstm>,
}

impl ContextModel {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        pooled_dim: usize,
        group_dim: usize,
        groups: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let global = BiLstm::new(store, "tcmm.lstm0", pooled_dim, hidden, rng)?;
        let groups = (1..=groups)
            .map(|k| BiLstm::new(store, &format!("tcmm.lstm{k}"), group_dim, hidden, rng))
            .collect::<Result<_>>()?;
        Ok(ContextModel { global, groups })
    }

    pub fn slots(&self) -> usize {
        self.groups.len() + 1
    }

    pub fn context_dim(&self) -> usize {
        2 * self.global.hidden
    }

    /// Builds `[T, K + 1, 2H]` contexts: slot 0 from `pooled` (`[T, C]`),
    /// slot `k` from group `k - 1` of `group_features` (`[T, K, C']`).
    pub fn build_contexts(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pooled: Var,
        group_features: Option<Var>,
    ) -> Result<Var> {
        let t = g.shape(pooled)[0];
        let mut slots = Vec::with_capacity(self.slots());
        slots.push(self.global.run(g, store, pooled)?);
        match (group_features, self.groups.len()) {
            (None, 0) => {}
            (Some(gf), k) if k > 0 => {
                let [gt, gk, gc] = *g.shape(gf) else {
                    return Err(Error::invalid("group features must be [T, K, C']"));
                };
                if gt != t || gk != k {
                    return Err(Error::invalid(format!(
                        "group features {:?} do not match {k} groups over {t} steps",
                        g.shape(gf)
                    )));
                }
                for (idx, lstm) in self.groups.iter().enumerate() {
                    let series = g.slice(gf, 1, idx, 1)?;
                    let series = g.reshape(series, &[t, gc])?;
                    slots.push(lstm.run(g, store, series)?);
                }
            }
            _ => return Err(Error::invalid("group features do not match the configured group count")),
        }
        let width = self.context_dim();
        let reshaped = slots
            .into_iter()
            .map(|s| g.reshape(s, &[t, 1, width]))
            .collect::<Result<Vec<_>>>()?;
        g.concat(&reshaped, 1)
    }
}

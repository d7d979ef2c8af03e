use ndarray::Zip;

use crate::autodiff::{Group, Matrix, ParamGrads, ParamId, ParameterStore};

/// Whether an update follows or opposes the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Descent => -1.0,
            Direction::Ascent => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
}

/// One bias-corrected Adam update of `param` in place. `t` is the 1-based
/// step index after this update.
pub fn adam_step(
    state: &mut Moments,
    param: &mut Matrix,
    grad: &Matrix,
    h: AdamHyper,
    t: u64,
    dir: Direction,
) {
    let (b1, b2) = (h.beta1, h.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let s = dir.sign() * h.lr;
    Zip::from(param)
        .and(&mut state.m)
        .and(&mut state.v)
        .and(grad)
        .for_each(|p, m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p += s * (*m / c1) / ((*v / c2).sqrt() + h.eps);
        });
}

/// Adam state for every parameter of one group, with its own step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    group: Group,
    ids: Vec<ParamId>,
    moments: Vec<Moments>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParameterStore, group: Group) -> Self {
        let ids = store.ids_in(group);
        let moments = ids
            .iter()
            .map(|&id| {
                let dim = store.value(id).dim();
                Moments {
                    m: Matrix::zeros(dim),
                    v: Matrix::zeros(dim),
                }
            })
            .collect();
        Self {
            group,
            ids,
            moments,
            t: 0,
        }
    }

    pub fn group(&self) -> Group {
        self.group
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn apply(
        &mut self,
        store: &mut ParameterStore,
        grads: &ParamGrads,
        h: AdamHyper,
        dir: Direction,
    ) {
        self.t += 1;
        for (id, mom) in self.ids.iter().zip(&mut self.moments) {
            adam_step(mom, store.value_mut(*id), grads.get(*id), h, self.t, dir);
        }
    }
}

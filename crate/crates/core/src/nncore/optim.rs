use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.99, weight_decay: 0.05, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct RowMoments<T> {
    moments: Moments<T>,
    step: u64,
}

/// First/second moments per parameter plus the global step counter.
/// Rows of a sparsely-updated table keep their own step count so bias
/// correction reflects how often that row was actually touched.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    step: u64,
    params: BTreeMap<String, Moments<T>>,
    rows: BTreeMap<usize, RowMoments<T>>,
}

impl<T: Scalar> Default for OptimState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> OptimState<T> {
    pub fn new() -> Self {
        Self { step: 0, params: BTreeMap::new(), rows: BTreeMap::new() }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn row_step(&self, row: usize) -> u64 {
        self.rows.get(&row).map_or(0, |r| r.step)
    }
}

fn update<T: Scalar>(
    w: &mut [T],
    g: &[T],
    m: &mut Moments<T>,
    step: u64,
    hp: &AdamW,
    decay: bool,
) {
    let b1 = T::lit(hp.beta1);
    let b2 = T::lit(hp.beta2);
    let lr = T::lit(hp.lr);
    let eps = T::lit(hp.eps);
    let bc1 = T::lit(1.0 - hp.beta1.powi(step as i32));
    let bc2 = T::lit(1.0 - hp.beta2.powi(step as i32));
    let shrink = T::lit(1.0 - hp.lr * hp.weight_decay);
    for i in 0..w.len() {
        m.first[i] = b1 * m.first[i] + (T::one() - b1) * g[i];
        m.second[i] = b2 * m.second[i] + (T::one() - b2) * g[i] * g[i];
        if decay {
            w[i] = w[i] * shrink;
        }
        let mhat = m.first[i] / bc1;
        let vhat = m.second[i] / bc2;
        w[i] = w[i] - lr * mhat / (vhat.sqrt() + eps);
    }
}

impl AdamW {
    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }

    /// One update of every parameter in `store` from its grad slot; clears
    /// the grad slots afterwards.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, state: &mut OptimState<T>) -> Result<()> {
        if let Some((name, _)) = store.iter().find(|(_, p)| p.tensor.grad().is_none()) {
            return Err(Error::State(format!("parameter `{name}` has no gradient")));
        }
        state.step += 1;
        for (name, p) in store.iter_mut() {
            let n = p.tensor.len();
            let m = state.params.entry(name.to_owned()).or_insert_with(|| Moments {
                first: vec![T::zero(); n],
                second: vec![T::zero(); n],
            });
            let g = p.tensor.grad().expect("checked above").to_vec();
            update(p.tensor.data_mut(), &g, m, state.step, self, p.decay);
            p.tensor.clear_grad();
        }
        Ok(())
    }

    /// Sparse update of selected rows of `table`. Each row advances its own
    /// step counter.
    pub fn step_rows<T: Scalar>(
        &self,
        table: &mut Tensor<T>,
        rows: &[(usize, &[T])],
        state: &mut OptimState<T>,
        decay: bool,
    ) -> Result<()> {
        let (n, cols) = table.dims2();
        for &(r, g) in rows {
            if r >= n || g.len() != cols {
                return Err(Error::Shape(format!("row update {r} ({} values) does not fit {n}x{cols}", g.len())));
            }
        }
        for &(r, g) in rows {
            let rm = state.rows.entry(r).or_insert_with(|| RowMoments {
                moments: Moments { first: vec![T::zero(); cols], second: vec![T::zero(); cols] },
                step: 0,
            });
            rm.step += 1;
            update(table.row_mut(r), g, &mut rm.moments, rm.step, self, decay);
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate at `step` of `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Range(format!("step {step} beyond schedule length {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(w: f64, g: Option<f64>, decay: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut t = Tensor::vector(vec![w]).unwrap();
        if let Some(g) = g {
            t.set_grad(vec![g]).unwrap();
        }
        s.insert("w", t, decay).unwrap();
        s
    }

    #[test]
    fn adamw_first_step_hand_value() {
        let mut s = one_param(1.0, Some(1.0), true);
        let mut st = OptimState::new();
        let opt = AdamW { lr: 0.1, beta1: 0.9, beta2: 0.99, weight_decay: 0.05, eps: 1e-8 };
        opt.step(&mut s, &mut st).unwrap();
        // m̂ = v̂ = 1 -> update 0.1 (less eps) plus decay 0.1 * 0.05 * 1
        assert!((s.get("w").unwrap().data()[0] - 0.895).abs() < 1e-7);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn zero_grad_no_decay_leaves_weight() {
        let mut s = one_param(0.37, Some(0.0), true);
        let mut st = OptimState::new();
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        opt.step(&mut s, &mut st).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 0.37);
    }

    #[test]
    fn exempt_params_skip_decay() {
        let mut s = one_param(2.0, Some(0.0), false);
        let mut st = OptimState::new();
        AdamW { lr: 0.5, ..AdamW::default() }.step(&mut s, &mut st).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 2.0);
    }

    #[test]
    fn identical_state_identical_result() {
        let opt = AdamW::default();
        let run = || {
            let mut s = one_param(0.3, Some(-0.7), true);
            let mut st = OptimState::new();
            opt.step(&mut s, &mut st).unwrap();
            s.get_mut("w").unwrap().set_grad(vec![0.2]).unwrap();
            opt.step(&mut s, &mut st).unwrap();
            s.get("w").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_grad_is_state_error() {
        let mut s = one_param(1.0, None, true);
        let mut st = OptimState::new();
        assert!(matches!(AdamW::default().step(&mut s, &mut st), Err(Error::State(_))));
        // grads are consumed by a step
        let mut s = one_param(1.0, Some(1.0), true);
        AdamW::default().step(&mut s, &mut st).unwrap();
        assert!(AdamW::default().step(&mut s, &mut st).is_err());
    }

    #[test]
    fn row_updates_track_their_own_steps() {
        let mut t = Tensor::<f32>::zeros(vec![3, 2]).unwrap();
        let mut st = OptimState::new();
        let g = [1.0f32, -1.0];
        AdamW::default().step_rows(&mut t, &[(1, &g)], &mut st, false).unwrap();
        AdamW::default().step_rows(&mut t, &[(1, &g)], &mut st, false).unwrap();
        assert_eq!(st.row_step(1), 2);
        assert_eq!(st.row_step(0), 0);
        assert_eq!(t.row(0), &[0.0, 0.0]);
        assert!(t.row(1)[0] < 0.0 && t.row(1)[1] > 0.0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.3).unwrap(), 0.3);
        assert!((cosine_lr(50, 100, 0.3).unwrap() - 0.15).abs() < 1e-15);
        assert!(cosine_lr(100, 100, 0.3).unwrap().abs() < 1e-12);
        assert!(matches!(cosine_lr(101, 100, 0.3), Err(Error::Range(_))));
    }
}

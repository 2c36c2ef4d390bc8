//! Anything that assigns a value to a state.

use crate::bellman::BellmanOperator;

pub trait ValueFunction: Sync {
    fn value(&self, x: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64 + Sync> ValueFunction for F {
    fn value(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// `v + offset` for a constant offset.
pub struct Shifted<'a, V: ?Sized> {
    pub inner: &'a V,
    pub offset: f64,
}

impl<V: ValueFunction + ?Sized> ValueFunction for Shifted<'_, V> {
    fn value(&self, x: &[f64]) -> f64 {
        self.inner.value(x) + self.offset
    }
}

/// Mean squared one-step Bellman defect of `v` over `states`.
pub fn mean_td_loss<V: ValueFunction + ?Sized>(
    op: &BellmanOperator,
    v: &V,
    states: &[Vec<f64>],
) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let total: f64 = states
        .iter()
        .map(|x| {
            let d = v.value(x) - op.apply(v, x).value;
            d * d
        })
        .sum();
    total / states.len() as f64
}

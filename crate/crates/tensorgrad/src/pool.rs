//! Per-thread recycling of f64 buffers. Training rebuilds a graph with the
//! same shapes every step; handing dropped buffers back avoids faulting in
//! fresh pages for every activation.

use std::cell::RefCell;
use std::collections::HashMap;

const LIMIT_BYTES: usize = 512 << 20;

#[derive(Default)]
struct Pool {
    free: HashMap<usize, Vec<Vec<f64>>>,
    bytes: usize,
}

thread_local! {
    static POOL: RefCell<Pool> = RefCell::new(Pool::default());
}

/// Empty vector with capacity for at least `len` values.
pub(crate) fn empty(len: usize) -> Vec<f64> {
    let reused = POOL.with(|p| {
        let mut p = p.borrow_mut();
        let v = p.free.get_mut(&len).and_then(Vec::pop);
        if v.is_some() {
            p.bytes -= len * 8;
        }
        v
    });
    match reused {
        Some(mut v) => {
            v.clear();
            v
        }
        None => Vec::with_capacity(len),
    }
}

pub(crate) fn zeroed(len: usize) -> Vec<f64> {
    let mut v = empty(len);
    v.resize(len, 0.0);
    v
}

pub(crate) fn copy(src: &[f64]) -> Vec<f64> {
    let mut v = empty(src.len());
    v.extend_from_slice(src);
    v
}

pub(crate) fn give(v: Vec<f64>) {
    let cap = v.capacity();
    if cap == 0 {
        return;
    }
    POOL.with(|p| {
        let mut p = p.borrow_mut();
        if p.bytes + cap * 8 <= LIMIT_BYTES {
            p.bytes += cap * 8;
            p.free.entry(cap).or_default().push(v);
        }
    });
}

/// True when every value is finite. Branch-free so it vectorizes.
pub(crate) fn all_finite(v: &[f64]) -> bool {
    const EXP: u64 = 0x7ff0_0000_0000_0000;
    v.iter().fold(0u64, |bad, x| bad | u64::from(x.to_bits() & EXP == EXP)) == 0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_are_reused_and_cleared() {
        let mut v = zeroed(1000);
        v[3] = 7.0;
        let ptr = v.as_ptr();
        give(v);
        let w = zeroed(1000);
        assert_eq!(w.as_ptr(), ptr);
        assert!(w.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn finite_check() {
        assert!(all_finite(&[0.0, -1.0, f64::MAX, f64::MIN_POSITIVE]));
        assert!(!all_finite(&[0.0, f64::NAN]));
        assert!(!all_finite(&[f64::NEG_INFINITY]));
    }
}

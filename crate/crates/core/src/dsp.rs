//! FFT plumbing shared by the measurement and simulation code.

use std::cell::RefCell;
use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex64;

/// Floor applied to energy ratios before taking a logarithm.
pub const DB_FLOOR: f64 = 1e-12;

thread_local! {
    static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

fn forward_plan(len: usize) -> Arc<dyn RealToComplex<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(len))
}

fn inverse_plan(len: usize) -> Arc<dyn ComplexToReal<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(len))
}

/// Zero-pads `x` to `len` and returns the non-negative half of its DFT
/// (`len / 2 + 1` bins).
pub(crate) fn rfft_padded(x: &[f64], len: usize) -> Vec<Complex64> {
    debug_assert!(len >= x.len());
    let plan = forward_plan(len);
    let mut input = vec![0.0; len];
    input[..x.len()].copy_from_slice(x);
    let mut out = plan.make_output_vec();
    plan.process(&mut input, &mut out).expect("buffer sizes match the plan");
    out
}

/// Inverse of [`rfft_padded`] for a length-`len` signal, normalized by 1/len.
/// The imaginary parts of the DC and Nyquist bins are ignored.
pub(crate) fn irfft(mut spectrum: Vec<Complex64>, len: usize) -> Vec<f64> {
    debug_assert_eq!(spectrum.len(), len / 2 + 1);
    spectrum[0].im = 0.0;
    if len.is_multiple_of(2) {
        spectrum[len / 2].im = 0.0;
    }
    let plan = inverse_plan(len);
    let mut out = plan.make_output_vec();
    plan.process(&mut spectrum, &mut out).expect("buffer sizes match the plan");
    let scale = 1.0 / len as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Smallest power of two that is at least `n`.
pub(crate) fn fft_len(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// Full linear convolution of `a` and `b` (length `a.len() + b.len() - 1`).
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = fft_len(out_len);
    let fa = rfft_padded(a, n);
    let fb = rfft_padded(b, n);
    let prod = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    let mut out = irfft(prod, n);
    out.truncate(out_len);
    out
}

/// Cross-correlation `c[lag] = sum_n x[n + lag] * y[n]` for non-negative lags
/// `0..x.len()`.
pub fn cross_correlate(x: &[f64], y: &[f64]) -> Vec<f64> {
    if x.is_empty() || y.is_empty() {
        return vec![0.0; x.len()];
    }
    let n = fft_len(x.len() + y.len() - 1);
    let fx = rfft_padded(x, n);
    let fy = rfft_padded(y, n);
    let prod = fx.iter().zip(&fy).map(|(a, b)| a * b.conj()).collect();
    let mut out = irfft(prod, n);
    out.truncate(x.len());
    out
}

/// Full-range cross-correlation, returning `(lags, values)` for lags in
/// `-(y.len()-1)..x.len()`.
pub fn cross_correlate_full(x: &[f64], y: &[f64]) -> (Vec<i64>, Vec<f64>) {
    if x.is_empty() || y.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let n = fft_len(x.len() + y.len() - 1);
    let fx = rfft_padded(x, n);
    let fy = rfft_padded(y, n);
    let prod = fx.iter().zip(&fy).map(|(a, b)| a * b.conj()).collect();
    let circ = irfft(prod, n);
    let neg = y.len() - 1;
    let mut lags = Vec::with_capacity(neg + x.len());
    let mut vals = Vec::with_capacity(neg + x.len());
    for k in (1..=neg).rev() {
        lags.push(-(k as i64));
        vals.push(circ[n - k]);
    }
    for (k, &v) in circ.iter().enumerate().take(x.len()) {
        lags.push(k as i64);
        vals.push(v);
    }
    (lags, vals)
}

/// Index of the largest value; earliest index wins ties.
pub(crate) fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Index of the largest absolute value; earliest index wins ties.
pub(crate) fn argmax_abs(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        let a = v.abs();
        match best {
            Some((_, b)) if a <= b => {}
            _ => best = Some((i, a)),
        }
    }
    best.map(|(i, _)| i)
}

pub(crate) fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `10 * log10(ratio)` with the ratio clamped at [`DB_FLOOR`].
pub fn power_db(ratio: f64) -> f64 {
    10.0 * ratio.max(DB_FLOOR).log10()
}

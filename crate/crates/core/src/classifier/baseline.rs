use std::collections::BTreeMap;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::dsp;
use crate::error::{Error, Result};
use crate::signal::AudioSignal;
use crate::simulator::Label;

pub const BASELINE_THRESHOLD: f64 = 0.6;

/// Maximum normalized cross-correlation over all lags, in [-1, 1].
pub fn xcorr_similarity(a: &AudioSignal, b: &AudioSignal) -> Result<f64> {
    a.check_same_rate(b)?;
    let norm = norm_of(a)? * norm_of(b)?;
    let (_, corr) = dsp::cross_correlate_full(a.samples(), b.samples());
    Ok(peak(&corr) / norm)
}

/// Similarity of two recordings and the copresence verdict of the
/// cross-correlation scheme at `threshold`.
pub fn baseline_xcorr(a: &AudioSignal, b: &AudioSignal, threshold: f64) -> Result<(f64, Label)> {
    let s = xcorr_similarity(a, b)?;
    Ok((s, verdict(s, threshold)))
}

pub fn verdict(similarity: f64, threshold: f64) -> Label {
    if similarity >= threshold {
        Label::Copresent
    } else {
        Label::NonCopresent
    }
}

fn norm_of(s: &AudioSignal) -> Result<f64> {
    let e = s.energy();
    if e == 0.0 {
        return Err(Error::Degenerate("cross-correlation of a zero-energy signal".into()));
    }
    Ok(e.sqrt())
}

fn peak(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Similarities for many pairs drawn from one pool of recordings. Each
/// recording is transformed once; all recordings must share length and rate.
pub fn xcorr_similarities(recordings: &[AudioSignal], pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    let Some(first) = recordings.first() else {
        return if pairs.is_empty() {
            Ok(Vec::new())
        } else {
            Err(Error::param("pairs", "no recordings to index"))
        };
    };
    let len = first.len();
    for r in recordings {
        first.check_same_rate(r)?;
        if r.len() != len {
            return Err(Error::param("recordings", "batched scoring needs equal lengths"));
        }
    }
    if pairs.iter().any(|&(a, b)| a >= recordings.len() || b >= recordings.len()) {
        return Err(Error::param("pairs", "recording index out of range"));
    }
    let mut used: BTreeMap<usize, usize> = BTreeMap::new();
    for &(a, b) in pairs {
        let next = used.len();
        used.entry(a).or_insert(next);
        let next = used.len();
        used.entry(b).or_insert(next);
    }
    let n = dsp::fft_len(2 * len - 1);
    let ids: Vec<usize> = {
        let mut v = vec![0; used.len()];
        for (&rec, &slot) in &used {
            v[slot] = rec;
        }
        v
    };
    let spectra: Vec<(Vec<Complex64>, f64)> = ids
        .par_iter()
        .map(|&i| Ok((dsp::rfft_padded(recordings[i].samples(), n), norm_of(&recordings[i])?)))
        .collect::<Result<_>>()?;
    Ok(pairs
        .par_iter()
        .map(|&(a, b)| {
            let (sa, na) = &spectra[used[&a]];
            let (sb, nb) = &spectra[used[&b]];
            let prod = sa.iter().zip(sb).map(|(x, y)| x * y.conj()).collect();
            let circ = dsp::irfft(prod, n);
            // lags -(len-1)..len live at the two ends of the circular result
            let pos = peak(&circ[..len]);
            let neg = peak(&circ[n - (len - 1)..]);
            pos.max(neg) / (na * nb)
        })
        .collect())
}

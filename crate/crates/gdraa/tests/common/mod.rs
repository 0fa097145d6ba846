//! Shared helpers for the integration suites: an independent elementwise-mean
//! reference, and tolerance utilities.

use gdraa::buffers::ElementWidth;
use gdraa::collectives::reduce_mean_ascending;
use gdraa::harness::train::gen_gradient;

/// What every collective must compute for iteration `iteration`: the
/// elementwise mean of the per-rank synthetic gradients, summed in ascending
/// rank order at full f64 precision, with each contribution — and the final
/// aggregate — rounded through the wire width.
pub fn mean_oracle(
    seed: u64,
    workers: usize,
    iteration: u64,
    elements: usize,
    width: ElementWidth,
) -> Vec<f64> {
    let contribs: Vec<Vec<f64>> = (0..workers as u32)
        .map(|r| {
            let mut g = gen_gradient(seed, r, iteration, elements);
            width.round_to_wire(&mut g);
            g
        })
        .collect();
    let refs: Vec<&[f64]> = contribs.iter().map(|c| c.as_slice()).collect();
    let mut out = vec![0.0; elements];
    reduce_mean_ascending(&refs, &mut out);
    width.round_to_wire(&mut out);
    out
}

/// Largest `|a − b| / max(1, |b|)` over the pair of slices.
pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}

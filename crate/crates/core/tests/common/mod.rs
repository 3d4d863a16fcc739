//! Independent oracles shared by the integration and acceptance tests. These
//! deliberately avoid the library's implementation paths: spectral estimates
//! come from a naive O(n^2) DFT, and the Wilcoxon reference enumerates all
//! 2^n sign patterns directly.

/// Welch estimate computed from scratch with a direct DFT: segment length
/// 1024, 50% overlap, periodic Hann, per-segment mean removal, one-sided
/// density scaling, DC dropped, Nyquist kept.
pub fn welch_psd_direct_dft(window: &[f64], fs: f64) -> Vec<f64> {
    let seg_len = 1024usize;
    let hop = 512usize;
    assert_eq!(window.len(), 2048);

    let hann: Vec<f64> = (0..seg_len)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / seg_len as f64).cos()))
        .collect();
    let win_sumsq: f64 = hann.iter().map(|w| w * w).sum();
    let scale = 1.0 / (fs * win_sumsq);

    let n_segments = (window.len() - seg_len) / hop + 1;
    let mut acc = vec![0.0f64; seg_len / 2 + 1];
    for s in 0..n_segments {
        let seg = &window[s * hop..s * hop + seg_len];
        let mean = seg.iter().sum::<f64>() / seg_len as f64;
        let x: Vec<f64> = seg.iter().zip(&hann).map(|(v, w)| (v - mean) * w).collect();
        for (k, slot) in acc.iter_mut().enumerate() {
            let mut re = 0.0f64;
            let mut im = 0.0f64;
            for (n, &v) in x.iter().enumerate() {
                let phase = -2.0 * std::f64::consts::PI * (k * n) as f64 / seg_len as f64;
                re += v * phase.cos();
                im += v * phase.sin();
            }
            *slot += re * re + im * im;
        }
    }

    let mut bins = Vec::with_capacity(seg_len / 2);
    for k in 1..=seg_len / 2 {
        let mut p = acc[k] * scale / n_segments as f64;
        if k != seg_len / 2 {
            p *= 2.0;
        }
        bins.push(p);
    }
    bins
}

/// Exact two-sided Wilcoxon p by brute-force enumeration of every sign
/// pattern over the observed rank multiset.
pub fn wilcoxon_brute_force_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len();
    assert!(n <= 20, "enumeration oracle limited to small n");
    let mut le = 0u64;
    let mut ge = 0u64;
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= w_plus + 1e-12 {
            le += 1;
        }
        if w >= w_plus - 1e-12 {
            ge += 1;
        }
    }
    let total = (1u64 << n) as f64;
    (2.0 * (le as f64 / total).min(ge as f64 / total)).min(1.0)
}

/// Average-rank assignment for |d|, mirroring the standard definition.
pub fn signed_ranks(diffs: &[f64]) -> Vec<f64> {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nonzero.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| nonzero[i].abs().total_cmp(&nonzero[j].abs()));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nonzero[order[j + 1]].abs() == nonzero[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

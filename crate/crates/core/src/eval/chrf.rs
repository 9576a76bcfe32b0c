//! chrF with character n-grams up to 6, no word n-grams, whitespace removed
//! and β = 2, computed the way sacrebleu 2.3.1 computes it.

use std::collections::HashMap;

use super::bleu::is_py_space;

pub const CHAR_ORDER: usize = 6;
pub const BETA: f64 = 2.0;

fn ngrams(v: &[char], n: usize) -> HashMap<&[char], u64> {
    let mut m = HashMap::new();
    for w in v.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// `[hyp, ref, match]` per order, flattened.
pub fn segment_stats(reference: &str, hypothesis: &str) -> [u64; 3 * CHAR_ORDER] {
    let strip = |s: &str| -> Vec<char> { s.chars().filter(|&c| !is_py_space(c)).collect() };
    let (r, h) = (strip(reference), strip(hypothesis));
    let mut stats = [0u64; 3 * CHAR_ORDER];
    for n in 1..=CHAR_ORDER {
        let (rn, hn) = (ngrams(&r, n), ngrams(&h, n));
        let hyp_count: u64 = hn.values().sum();
        let matches: u64 = hn
            .iter()
            .map(|(g, &c)| rn.get(g).map_or(0, |&rc| c.min(rc)))
            .sum();
        let i = 3 * (n - 1);
        stats[i] = if rn.is_empty() { 0 } else { hyp_count };
        stats[i + 1] = rn.values().sum();
        stats[i + 2] = matches;
    }
    stats
}

/// chrF from (summed) statistics, averaging over orders present on both sides.
pub fn chrf_from_stats(stats: &[u64]) -> f64 {
    let factor = BETA * BETA;
    let (mut avg_p, mut avg_r, mut eff) = (0.0, 0.0, 0usize);
    for n in 0..CHAR_ORDER {
        let (h, r, m) = (stats[3 * n], stats[3 * n + 1], stats[3 * n + 2]);
        if h > 0 && r > 0 {
            avg_p += m as f64 / h as f64;
            avg_r += m as f64 / r as f64;
            eff += 1;
        }
    }
    if eff == 0 {
        return 0.0;
    }
    avg_p /= eff as f64;
    avg_r /= eff as f64;
    if avg_p + avg_r == 0.0 {
        return 0.0;
    }
    100.0 * (1.0 + factor) * avg_p * avg_r / (factor * avg_p + avg_r)
}

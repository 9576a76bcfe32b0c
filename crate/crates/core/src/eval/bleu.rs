//! Corpus BLEU-4 with 13a tokenization and exponential smoothing, computed the
//! way sacrebleu 2.3.1 computes it.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;

pub const MAX_ORDER: usize = 4;

fn rules() -> &'static [(Regex, &'static str); 4] {
    static RULES: OnceLock<[(Regex, &'static str); 4]> = OnceLock::new();
    RULES.get_or_init(|| {
        let re = |p: &str| Regex::new(p).expect("static regex");
        [
            (re(r"([\{-~\[-\x60 -&\(-\+:-@/])"), " ${1} "),
            (re(r"([^0-9])([\.,])"), "${1} ${2} "),
            (re(r"([\.,])([^0-9])"), " ${1} ${2}"),
            (re(r"([0-9])(-)"), "${1} ${2} "),
        ]
    })
}

/// Whitespace as Python's `str.split()` sees it.
pub(crate) fn is_py_space(c: char) -> bool {
    c.is_whitespace() || ('\u{1c}'..='\u{1f}').contains(&c)
}

pub(crate) fn py_split(s: &str) -> impl Iterator<Item = &str> {
    s.split(is_py_space).filter(|w| !w.is_empty())
}

/// The mteval-v13a tokenizer.
pub fn tokenize_13a(line: &str) -> String {
    let mut line = line
        .replace("<skipped>", "")
        .replace("-\n", "")
        .replace('\n', " ");
    if line.contains('&') {
        line = line
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut line = format!(" {line} ");
    for (re, rep) in rules() {
        line = re.replace_all(&line, *rep).into_owned();
    }
    py_split(&line).collect::<Vec<_>>().join(" ")
}

fn ngrams(tokens: &[&str]) -> HashMap<Vec<String>, u64> {
    let mut out = HashMap::new();
    for n in 1..=MAX_ORDER {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// `[hyp_len, ref_len, correct_1..4, total_1..4]` for one segment.
pub fn segment_stats(reference: &str, hypothesis: &str) -> [u64; 2 + 2 * MAX_ORDER] {
    let r = tokenize_13a(reference.trim_end_matches(is_py_space));
    let h = tokenize_13a(hypothesis.trim_end_matches(is_py_space));
    let rt: Vec<&str> = py_split(&r).collect();
    let ht: Vec<&str> = py_split(&h).collect();
    let rn = ngrams(&rt);
    let mut stats = [0u64; 2 + 2 * MAX_ORDER];
    stats[0] = ht.len() as u64;
    stats[1] = rt.len() as u64;
    for (g, &c) in &ngrams(&ht) {
        let n = g.len() - 1;
        stats[2 + MAX_ORDER + n] += c;
        if let Some(&rc) = rn.get(g) {
            stats[2 + n] += c.min(rc);
        }
    }
    stats
}

fn my_log(x: f64) -> f64 {
    if x == 0.0 {
        -9_999_999_999.0
    } else {
        x.ln()
    }
}

/// BLEU from summed statistics.
pub fn bleu_from_stats(stats: &[u64]) -> f64 {
    let (sys_len, ref_len) = (stats[0] as f64, stats[1] as f64);
    let correct = &stats[2..2 + MAX_ORDER];
    let total = &stats[2 + MAX_ORDER..2 + 2 * MAX_ORDER];
    let bp = if sys_len < ref_len {
        if sys_len > 0.0 {
            (1.0 - ref_len / sys_len).exp()
        } else {
            0.0
        }
    } else {
        1.0
    };
    if correct.iter().all(|&c| c == 0) {
        return 0.0;
    }
    let mut precisions = [0.0; MAX_ORDER];
    let mut smooth = 1.0;
    for n in 0..MAX_ORDER {
        if total[n] == 0 {
            break;
        }
        precisions[n] = if correct[n] == 0 {
            smooth *= 2.0;
            100.0 / (smooth * total[n] as f64)
        } else {
            100.0 * correct[n] as f64 / total[n] as f64
        };
    }
    let logs: f64 = precisions.iter().map(|&p| my_log(p)).sum();
    bp * (logs / MAX_ORDER as f64).exp()
}

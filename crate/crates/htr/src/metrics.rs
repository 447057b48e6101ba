//! Edit-distance evaluation: character and word error rates.
//!
//! `CER = 100 * (ins + sub + del) / n` where `n` is the reference length in
//! characters and the operation counts transform the hypothesis into the
//! reference. WER applies the same formula over whitespace-delimited words.

use serde::{Deserialize, Serialize};

use crate::codec::normalize_text;
use crate::error::{HtrError, Result};
use crate::parallel;

/// Minimal operation counts transforming hypothesis into reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOps {
    pub ins: usize,
    pub sub: usize,
    pub del: usize,
}

impl EditOps {
    pub fn total(&self) -> usize {
        self.ins + self.sub + self.del
    }
}

fn edit_ops<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditOps {
    let (n, m) = (reference.len(), hypothesis.len());
    // d[i][j]: distance between reference prefix i and hypothesis prefix j
    let mut d = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        d[idx(i, 0)] = i;
    }
    for j in 0..=m {
        d[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[idx(i, j)] = (d[idx(i - 1, j - 1)] + sub_cost)
                .min(d[idx(i, j - 1)] + 1)
                .min(d[idx(i - 1, j)] + 1);
        }
    }
    // deterministic backtrace, tie order: substitution > deletion > insertion
    let mut ops = EditOps::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = d[idx(i, j)];
        if i > 0 && j > 0 {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[idx(i - 1, j - 1)] + sub_cost == cur {
                ops.sub += sub_cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[idx(i, j - 1)] + 1 == cur {
            ops.del += 1; // extra hypothesis symbol
            j -= 1;
            continue;
        }
        ops.ins += 1; // reference symbol missing from hypothesis
        i -= 1;
    }
    ops
}

/// Unit-cost Levenshtein alignment of two (normalized) strings.
pub fn levenshtein(reference: &str, hypothesis: &str) -> EditOps {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    edit_ops(&r, &h)
}

/// Character error rate in percent; may exceed 100.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r = normalize_text(reference);
    let h = normalize_text(hypothesis);
    let n = r.chars().count();
    if n == 0 {
        return Err(HtrError::EmptyReference);
    }
    Ok(100.0 * levenshtein(&r, &h).total() as f64 / n as f64)
}

/// Word error rate in percent over whitespace-delimited tokens.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r = normalize_text(reference);
    let h = normalize_text(hypothesis);
    let rw: Vec<&str> = r.split_whitespace().collect();
    if rw.is_empty() {
        return Err(HtrError::EmptyReference);
    }
    let hw: Vec<&str> = h.split_whitespace().collect();
    Ok(100.0 * edit_ops(&rw, &hw).total() as f64 / rw.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleScore {
    pub reference: String,
    pub hypothesis: String,
    pub ops: EditOps,
    pub n: usize,
    pub cer_percent: f64,
}

/// Per-sample scores plus corpus aggregates. `corpus_cer`/`corpus_wer` are
/// micro-averages (summed edits over summed lengths); the `_macro` fields
/// are means of the per-line rates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CerReport {
    pub samples: Vec<SampleScore>,
    pub corpus_cer: f64,
    pub corpus_wer: f64,
    pub corpus_cer_macro: f64,
    pub corpus_wer_macro: f64,
}

impl CerReport {
    /// Score `(reference, hypothesis)` pairs; references must be non-empty.
    pub fn score(pairs: &[(String, String)]) -> Result<CerReport> {
        let samples: Vec<Result<(SampleScore, EditOps, usize, f64)>> =
            parallel::map_indexed(pairs.len(), |i| {
                let (reference, hypothesis) = &pairs[i];
                let r = normalize_text(reference);
                let h = normalize_text(hypothesis);
                let n = r.chars().count();
                if n == 0 {
                    return Err(HtrError::EmptyReference);
                }
                let ops = levenshtein(&r, &h);
                let rw: Vec<&str> = r.split_whitespace().collect();
                let hw: Vec<&str> = h.split_whitespace().collect();
                let wops = edit_ops(&rw, &hw);
                let wn = rw.len();
                let sample = SampleScore {
                    reference: r.clone(),
                    hypothesis: h.clone(),
                    ops,
                    n,
                    cer_percent: 100.0 * ops.total() as f64 / n as f64,
                };
                let wer_line = 100.0 * wops.total() as f64 / wn as f64;
                Ok((sample, wops, wn, wer_line))
            });

        let mut out = Vec::with_capacity(pairs.len());
        let (mut edits, mut chars, mut wedits, mut words) = (0usize, 0usize, 0usize, 0usize);
        let (mut cer_sum, mut wer_sum) = (0.0, 0.0);
        for s in samples {
            let (sample, wops, wn, wer_line) = s?;
            edits += sample.ops.total();
            chars += sample.n;
            wedits += wops.total();
            words += wn;
            cer_sum += sample.cer_percent;
            wer_sum += wer_line;
            out.push(sample);
        }
        let count = out.len().max(1) as f64;
        Ok(CerReport {
            corpus_cer: 100.0 * edits as f64 / chars.max(1) as f64,
            corpus_wer: 100.0 * wedits as f64 / words.max(1) as f64,
            corpus_cer_macro: cer_sum / count,
            corpus_wer_macro: wer_sum / count,
            samples: out,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str("  # |   CER% | ins sub del |  n | reference -> hypothesis\n");
        for (i, s) in self.samples.iter().enumerate() {
            out.push_str(&format!(
                "{:>3} | {:>6.2} | {:>3} {:>3} {:>3} | {:>2} | {:?} -> {:?}\n",
                i, s.cer_percent, s.ops.ins, s.ops.sub, s.ops.del, s.n, s.reference, s.hypothesis
            ));
        }
        out.push_str(&format!(
            "corpus CER {:.2}% (macro {:.2}%)  WER {:.2}% (macro {:.2}%)\n",
            self.corpus_cer, self.corpus_cer_macro, self.corpus_wer, self.corpus_wer_macro
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference implementation: direct recursion over suffixes, memoized.
    /// Independent of the DP table and backtrace above.
    pub fn brute_distance(a: &[char], b: &[char]) -> usize {
        fn rec(
            a: &[char],
            b: &[char],
            memo: &mut std::collections::HashMap<(usize, usize), usize>,
        ) -> usize {
            let key = (a.len(), b.len());
            if let Some(&v) = memo.get(&key) {
                return v;
            }
            let v = match (a.split_first(), b.split_first()) {
                (None, None) => 0,
                (None, Some(_)) => b.len(),
                (Some(_), None) => a.len(),
                (Some((x, ra)), Some((y, rb))) => {
                    let sub = rec(ra, rb, memo) + usize::from(x != y);
                    let del = rec(a, rb, memo) + 1;
                    let ins = rec(ra, b, memo) + 1;
                    sub.min(del).min(ins)
                }
            };
            memo.insert(key, v);
            v
        }
        rec(a, b, &mut std::collections::HashMap::new())
    }

    #[test]
    fn identical_strings() {
        assert_eq!(levenshtein("abc", "abc"), EditOps::default());
        assert_eq!(cer("abc", "abc").unwrap(), 0.0);
    }

    #[test]
    fn empty_hypothesis_is_all_insertions() {
        let ops = levenshtein("abc", "");
        assert_eq!(ops, EditOps { ins: 3, sub: 0, del: 0 });
    }

    #[test]
    fn kitab_kitaab() {
        let r: Vec<char> = "kitab".chars().collect();
        let h: Vec<char> = "kitaab".chars().collect();
        assert_eq!(brute_distance(&r, &h), 1);
        assert_eq!(levenshtein("kitab", "kitaab").total(), 1);
        assert_eq!(cer("kitab", "kitaab").unwrap(), 20.0);
    }

    #[test]
    fn cer_may_exceed_100() {
        let v = cer("ab", "xyzq").unwrap();
        assert!(v > 100.0);
    }

    #[test]
    fn cer_rejects_empty_reference() {
        assert!(matches!(cer("", "x"), Err(HtrError::EmptyReference)));
        assert!(matches!(wer("  ", "x"), Err(HtrError::EmptyReference)));
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer("a b c", "a b c").unwrap(), 0.0);
        let v = wer("a b c", "a x c").unwrap();
        assert!((v - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(wer("a", "").unwrap(), 100.0);
    }

    #[test]
    fn exhaustive_oracle_equality_ab_len6() {
        // all string pairs over {a, b} with lengths <= 6
        fn strings(len: usize) -> Vec<Vec<char>> {
            let mut out = vec![vec![]];
            for _ in 0..len {
                out = out
                    .into_iter()
                    .flat_map(|s| {
                        ['a', 'b'].into_iter().map(move |c| {
                            let mut t = s.clone();
                            t.push(c);
                            t
                        })
                    })
                    .collect();
            }
            out
        }
        let mut all = Vec::new();
        for l in 0..=6 {
            all.extend(strings(l));
        }
        for a in &all {
            for b in &all {
                assert_eq!(edit_ops(a, b).total(), brute_distance(a, b));
            }
        }
    }

    #[test]
    fn symmetry_and_minimality() {
        let cases = [("kitab", "kitaab"), ("abc", "cba"), ("", "xy"), ("aab", "baa")];
        for (a, b) in cases {
            let f = levenshtein(a, b);
            let r = levenshtein(b, a);
            assert_eq!(f.total(), r.total());
            // ins/del counts swap under argument exchange
            assert_eq!(f.ins, r.del);
            assert_eq!(f.del, r.ins);
        }
    }

    #[test]
    fn report_aggregates() {
        let pairs = vec![
            ("ab".to_string(), "ab".to_string()),
            ("cd ef".to_string(), "cd xf".to_string()),
        ];
        let rep = CerReport::score(&pairs).unwrap();
        assert_eq!(rep.samples.len(), 2);
        assert_eq!(rep.samples[0].cer_percent, 0.0);
        // micro: 1 edit over 7 chars
        assert!((rep.corpus_cer - 100.0 / 7.0).abs() < 1e-9);
        // macro: mean(0, 20)
        assert!((rep.corpus_cer_macro - 10.0).abs() < 1e-9);
        let json = rep.to_json();
        assert!(json.contains("corpus_cer"));
    }
}

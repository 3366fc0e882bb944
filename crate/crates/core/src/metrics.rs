//! Evaluation metrics: ROUGE-L, Exact Match, MinK, APE, Truth Ratio, and the
//! efficiency counters. All metric functions are pure and deterministic.

use std::collections::BTreeSet;

use crate::dataset::{Image, VQARecord};
use crate::error::{CoreError, Result};

/// Anything that can answer VQA queries and score answer likelihoods.
/// Implemented by the base model and by the module-wrapped unlearned model.
pub trait QaModel {
    fn generate_answer(&self, image: &Image, question: &str) -> Result<String>;
    /// Per-token log-likelihood of the answer (EOS included).
    fn answer_log_probs(&self, image: &Image, question: &str, answer: &str) -> Result<Vec<f32>>;
}

/// Token-level ROUGE-L F-score over whitespace tokens.
/// `F = 2PR/(P+R)` with `P = LCS/|hyp|`, `R = LCS/|ref|`; 0 if either side
/// is empty.
pub fn rouge_l(hypothesis: &str, reference: &str) -> f32 {
    let hyp: Vec<&str> = hypothesis.split_whitespace().collect();
    let rf: Vec<&str> = reference.split_whitespace().collect();
    if hyp.is_empty() || rf.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&hyp, &rf) as f32;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f32;
    let r = lcs / rf.len() as f32;
    2.0 * p * r / (p + r)
}

/// Longest common subsequence length, classic dynamic program.
pub fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const STOPWORDS: [&str; 6] = ["it", "is", "the", "a", "an", "of"];

/// Content words of an answer: its tokens minus a tiny function-word list.
pub fn keywords(answer: &str) -> BTreeSet<String> {
    answer
        .split_whitespace()
        .filter(|t| !STOPWORDS.contains(t))
        .map(|t| t.to_string())
        .collect()
}

/// Fraction of keywords present in the hypothesis (whole-token match).
pub fn exact_match(hypothesis: &str, keywords: &BTreeSet<String>) -> Result<f32> {
    if keywords.is_empty() {
        return Err(CoreError::contract("exact_match: empty keyword set"));
    }
    let hyp: BTreeSet<&str> = hypothesis.split_whitespace().collect();
    let hits = keywords.iter().filter(|k| hyp.contains(k.as_str())).count();
    Ok(hits as f32 / keywords.len() as f32)
}

/// Record-level EM with the degenerate rule: an empty answer scores 1.0
/// against an empty keyword set; a non-empty answer with no content words is
/// an invalid record.
pub fn record_exact_match(hypothesis: &str, answer: &str) -> Result<f32> {
    let kw = keywords(answer);
    if kw.is_empty() {
        if answer.split_whitespace().next().is_none() {
            return Ok(1.0);
        }
        return Err(CoreError::contract(format!(
            "invalid record: answer {answer:?} has no content words"
        )));
    }
    exact_match(hypothesis, &kw)
}

/// Mean of the lowest ceil(k% * T) per-token log-probs. Lower (more
/// negative) reads as "not in the training data".
pub fn min_k(log_probs: &[f32], k_percent: f32) -> Result<f32> {
    if log_probs.is_empty() {
        return Err(CoreError::contract("min_k: empty log-prob vector"));
    }
    if !(0.0..=100.0).contains(&k_percent) || k_percent == 0.0 {
        return Err(CoreError::contract(format!(
            "min_k: k_percent {k_percent} out of (0, 100]"
        )));
    }
    let t = log_probs.len();
    let take = ((k_percent / 100.0) * t as f32).ceil() as usize;
    let take = take.clamp(1, t);
    let mut sorted = log_probs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(sorted[..take].iter().sum::<f32>() / take as f32)
}

/// Length-normalized sequence probability: exp(mean per-token log-prob).
pub fn normalized_probability(log_probs: &[f32]) -> f32 {
    if log_probs.is_empty() {
        return 0.0;
    }
    (log_probs.iter().sum::<f32>() / log_probs.len() as f32).exp()
}

/// Truth ratio from precomputed log-probs: mean perturbed normalized
/// probability over the paraphrased answer's normalized probability.
pub fn truth_ratio_from_log_probs(paraphrase: &[f32], perturbed: &[Vec<f32>]) -> Result<f32> {
    if perturbed.is_empty() {
        return Err(CoreError::contract("truth_ratio: no perturbed answers"));
    }
    let p_true = normalized_probability(paraphrase).max(1e-30);
    let p_wrong = perturbed
        .iter()
        .map(|lp| normalized_probability(lp))
        .sum::<f32>()
        / perturbed.len() as f32;
    Ok(p_wrong / p_true)
}

/// Adversarial privacy extraction: mean EM over the record's question
/// paraphrases, generating with the record's image.
pub fn ape(model: &dyn QaModel, image: &Image, record: &VQARecord) -> Result<f32> {
    if record.q_paraphrases.is_empty() {
        return Err(CoreError::contract("ape: record has no paraphrases"));
    }
    let mut total = 0.0f32;
    for q in &record.q_paraphrases {
        let hyp = model.generate_answer(image, q)?;
        total += record_exact_match(&hyp, &record.answer)?;
    }
    Ok(total / record.q_paraphrases.len() as f32)
}

/// Truth ratio for a record: likelihoods of the perturbed answers vs the
/// paraphrased answer, all conditioned on the original question.
pub fn truth_ratio(model: &dyn QaModel, image: &Image, record: &VQARecord) -> Result<f32> {
    let para = model.answer_log_probs(image, &record.question, &record.a_paraphrase)?;
    let mut wrong = Vec::with_capacity(record.a_perturbed.len());
    for p in &record.a_perturbed {
        wrong.push(model.answer_log_probs(image, &record.question, p)?);
    }
    truth_ratio_from_log_probs(&para, &wrong)
}

/// Metric values for one evaluation split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitMetrics {
    pub count: usize,
    pub rouge_l: Option<f32>,
    pub exact_match: Option<f32>,
    pub ape: Option<f32>,
    pub min_k: Option<f32>,
    pub truth_ratio: Option<f32>,
}

/// Full evaluation result: per-split metrics plus efficiency counters.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub forget: SplitMetrics,
    pub retain: SplitMetrics,
    pub nonprivate: SplitMetrics,
    pub general: SplitMetrics,
    pub trainable_params: usize,
    pub wall_clock_seconds: f64,
    pub seconds_per_epoch: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_identity_and_hand_case() {
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
        // LCS("a x c", "a b c") = 2, P = R = 2/3, F = 2/3
        assert!((rouge_l("a x c", "a b c") - 2.0 / 3.0).abs() < 1e-6);
        assert_eq!(rouge_l("", "a"), 0.0);
        assert_eq!(rouge_l("a", ""), 0.0);
    }

    #[test]
    fn rouge_is_one_iff_identical() {
        assert!(rouge_l("a a", "a") < 1.0);
        assert!(rouge_l("a b", "b a") < 1.0);
    }

    #[test]
    fn exact_match_examples() {
        let kw: BTreeSet<String> = ["alpha", "beta"].iter().map(|s| s.to_string()).collect();
        assert_eq!(exact_match("alpha gamma", &kw).unwrap(), 0.5);
        assert_eq!(exact_match("beta then alpha", &kw).unwrap(), 1.0);
        assert_eq!(record_exact_match("", "").unwrap(), 1.0);
        assert!(record_exact_match("x", "the of a").is_err());
        // whole-token: "alphabet" does not contain keyword "alpha"
        assert_eq!(exact_match("alphabet", &kw).unwrap(), 0.0);
    }

    #[test]
    fn min_k_examples() {
        assert_eq!(min_k(&[-0.1, -3.0, -2.0, -0.2], 50.0).unwrap(), -2.5);
        assert_eq!(min_k(&[-1.5, -1.5, -1.5], 33.0).unwrap(), -1.5);
        let v = [-0.5, -1.0, -2.0];
        let mean = v.iter().sum::<f32>() / 3.0;
        assert!((min_k(&v, 100.0).unwrap() - mean).abs() < 1e-7);
        assert!(min_k(&[], 20.0).is_err());
        assert!(min_k(&[-1.0], 0.0).is_err());
    }

    #[test]
    fn min_k_monotone_in_percentage() {
        let mut rng = crate::rng::Rng::new(4);
        for _ in 0..100 {
            let n = 1 + rng.below(12);
            let lp: Vec<f32> = (0..n).map(|_| -rng.uniform(0.0, 5.0)).collect();
            let mut prev = f32::NEG_INFINITY;
            for kp in [10.0, 25.0, 50.0, 75.0, 100.0] {
                let v = min_k(&lp, kp).unwrap();
                assert!(v >= prev - 1e-6, "minK not monotone: {v} < {prev}");
                prev = v;
            }
        }
    }

    #[test]
    fn truth_ratio_hand_cases() {
        // paraphrase prob 0.5, perturbed {0.1, 0.2} -> 0.15/0.5 = 0.3
        let para = vec![(0.5f32).ln()];
        let wrong = vec![vec![(0.1f32).ln()], vec![(0.2f32).ln()]];
        let tr = truth_ratio_from_log_probs(&para, &wrong).unwrap();
        assert!((tr - 0.3).abs() < 1e-6);

        // indifferent model: all equal probabilities -> 1.0
        let para = vec![(0.25f32).ln(), (0.25f32).ln()];
        let wrong = vec![vec![(0.25f32).ln(), (0.25f32).ln()]; 3];
        let tr = truth_ratio_from_log_probs(&para, &wrong).unwrap();
        assert!((tr - 1.0).abs() < 1e-6);

        // strong preference for the truth: ratio heads to zero, reported raw
        let para = vec![0.0f32];
        let wrong = vec![vec![(1e-6f32).ln()]];
        let tr = truth_ratio_from_log_probs(&para, &wrong).unwrap();
        assert!(tr < 1e-5);
    }

    #[test]
    fn rouge_matches_brute_force_lcs_oracle() {
        // exhaustive subsequence-enumeration oracle on short random pairs
        fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
            let mut best = 0usize;
            for mask in 0u32..(1 << a.len()) {
                let sub: Vec<u8> = (0..a.len())
                    .filter(|i| mask >> i & 1 == 1)
                    .map(|i| a[i])
                    .collect();
                if sub.len() <= best {
                    continue;
                }
                // subsequence test against b
                let mut it = b.iter();
                if sub.iter().all(|c| it.any(|x| x == c)) {
                    best = sub.len();
                }
            }
            best
        }
        let mut rng = crate::rng::Rng::new(7);
        let alphabet = ["a", "b", "c", "d"];
        for _ in 0..300 {
            let la = rng.below(9);
            let lb = rng.below(9);
            let sa: Vec<&str> = (0..la).map(|_| alphabet[rng.below(4)]).collect();
            let sb: Vec<&str> = (0..lb).map(|_| alphabet[rng.below(4)]).collect();
            let fast = lcs_len(&sa, &sb);
            let ba: Vec<u8> = sa.iter().map(|s| s.as_bytes()[0]).collect();
            let bb: Vec<u8> = sb.iter().map(|s| s.as_bytes()[0]).collect();
            assert_eq!(fast, brute_lcs(&ba, &bb), "{sa:?} vs {sb:?}");
        }
    }
}

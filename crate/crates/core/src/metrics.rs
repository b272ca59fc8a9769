//! Evaluation metrics. All functions are pure.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::text::words;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("no examples to score")]
    Empty,
    #[error("prediction and gold lengths differ ({preds} vs {golds})")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("no out-of-domain examples; recall_out is undefined")]
    NoOod,
    #[error("turn {turn}: predicted and gold slot keys differ")]
    KeyMismatch { turn: usize },
    #[error("label {label} outside 0..{num_labels}")]
    LabelOutOfRange { label: usize, num_labels: usize },
    #[error("expected exactly {expected} entries, got {found}")]
    WrongCount { expected: usize, found: usize },
    #[error("relevance {0} outside [-1, 1]")]
    Relevance(f64),
    #[error("n-gram size must be at least 1")]
    ZeroN,
    #[error("metric {0} is not registered")]
    UnknownMetric(String),
    #[error("metric {name} is not finite ({value})")]
    NonFinite { name: String, value: f64 },
    #[error("reports disagree on {0}")]
    MixedMeta(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub acc_all: f64,
    pub acc_in: f64,
    pub acc_out: f64,
    pub recall_out: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    num as f64 / den as f64
}

fn check_lengths(preds: usize, golds: usize) -> Result<(), MetricError> {
    if preds != golds {
        return Err(MetricError::LengthMismatch { preds, golds });
    }
    if preds == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Intent metrics with `ood_class` as the out-of-domain label. `acc_out`
/// scores the binary in/out decision over every example; `acc_in` is exact
/// accuracy over in-domain golds (`NaN` when there are none).
pub fn classification_metrics(preds: &[usize], golds: &[usize], ood_class: usize) -> Result<ClassificationMetrics, MetricError> {
    check_lengths(preds.len(), golds.len())?;
    let (mut correct, mut in_total, mut in_correct, mut bin_correct, mut ood_total, mut ood_hit) = (0, 0, 0, 0, 0, 0);
    for (&p, &g) in preds.iter().zip(golds) {
        correct += usize::from(p == g);
        bin_correct += usize::from((p == ood_class) == (g == ood_class));
        if g == ood_class {
            ood_total += 1;
            ood_hit += usize::from(p == ood_class);
        } else {
            in_total += 1;
            in_correct += usize::from(p == g);
        }
    }
    if ood_total == 0 {
        return Err(MetricError::NoOod);
    }
    Ok(ClassificationMetrics {
        acc_all: ratio(correct, preds.len()),
        acc_in: if in_total == 0 { f64::NAN } else { ratio(in_correct, in_total) },
        acc_out: ratio(bin_correct, preds.len()),
        recall_out: ratio(ood_hit, ood_total),
    })
}

/// Plain accuracy.
pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64, MetricError> {
    check_lengths(preds.len(), golds.len())?;
    Ok(ratio(preds.iter().zip(golds).filter(|(p, g)| p == g).count(), preds.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateAccuracy {
    pub joint: f64,
    pub slot: f64,
}

/// One belief state: `"domain-slot"` to value.
pub type State = BTreeMap<String, String>;

pub fn joint_and_slot_accuracy(preds: &[State], golds: &[State]) -> Result<StateAccuracy, MetricError> {
    check_lengths(preds.len(), golds.len())?;
    let (mut joint, mut slots, mut slot_total) = (0, 0, 0);
    for (turn, (p, g)) in preds.iter().zip(golds).enumerate() {
        if !p.keys().eq(g.keys()) {
            return Err(MetricError::KeyMismatch { turn });
        }
        let hits = p.values().zip(g.values()).filter(|(a, b)| a == b).count();
        slots += hits;
        slot_total += g.len();
        joint += usize::from(hits == g.len());
    }
    Ok(StateAccuracy { joint: ratio(joint, preds.len()), slot: if slot_total == 0 { 1.0 } else { ratio(slots, slot_total) } })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub micro: f64,
    pub macro_: f64,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        ratio(2 * tp, den)
    }
}

/// Multi-label F1. A label with neither gold nor predicted occurrences
/// contributes 0 to the macro average.
pub fn f1_scores(preds: &[BTreeSet<usize>], golds: &[BTreeSet<usize>], num_labels: usize) -> Result<F1Scores, MetricError> {
    check_lengths(preds.len(), golds.len())?;
    let mut counts = alloc::vec![(0usize, 0usize, 0usize); num_labels];
    for (p, g) in preds.iter().zip(golds) {
        for &label in p.iter().chain(g) {
            if label >= num_labels {
                return Err(MetricError::LabelOutOfRange { label, num_labels });
            }
        }
        for &l in p.intersection(g) {
            counts[l].0 += 1;
        }
        for &l in p.difference(g) {
            counts[l].1 += 1;
        }
        for &l in g.difference(p) {
            counts[l].2 += 1;
        }
    }
    let (tp, fp, fn_) = counts.iter().fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    let macro_ = if num_labels == 0 { 0.0 } else { counts.iter().map(|&(a, b, c)| f1(a, b, c)).sum::<f64>() / num_labels as f64 };
    Ok(F1Scores { micro: f1(tp, fp, fn_), macro_ })
}

/// Thresholded multi-label decision: label `i` is on iff `scores[i] > threshold`.
pub fn active_labels(scores: &[f64], threshold: f64) -> BTreeSet<usize> {
    scores.iter().enumerate().filter(|(_, &s)| s > threshold).map(|(i, _)| i).collect()
}

/// Distinct `n`-token windows across all responses, tokenized by
/// [`words`]. Windows never span two responses.
pub fn unique_ngrams<S: AsRef<str>>(responses: &[S], n: usize) -> Result<usize, MetricError> {
    if n == 0 {
        return Err(MetricError::ZeroN);
    }
    let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
    for r in responses {
        let toks = words(r.as_ref());
        for w in toks.windows(n) {
            seen.insert(w.to_vec());
        }
    }
    Ok(seen.len())
}

pub const TOP_K_DIVERSITY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityCoherence {
    pub diversity: f64,
    pub coherence: f64,
    pub combined: f64,
}

pub fn combined_score(diversity: f64, coherence: f64) -> f64 {
    diversity + 10.0 * coherence
}

/// Act-type diversity and mean relevance of one history's top-10 responses.
/// Entries are `(response, act types, relevance)`.
pub fn diversity_coherence<S: AsRef<str>>(top: &[(S, BTreeSet<String>, f64)]) -> Result<DiversityCoherence, MetricError> {
    if top.len() != TOP_K_DIVERSITY {
        return Err(MetricError::WrongCount { expected: TOP_K_DIVERSITY, found: top.len() });
    }
    let mut acts = BTreeSet::new();
    let mut rel = 0.0;
    for (_, a, r) in top {
        if !(-1.0..=1.0).contains(r) {
            return Err(MetricError::Relevance(*r));
        }
        acts.extend(a.iter().cloned());
        rel += r;
    }
    let diversity = acts.len() as f64;
    let coherence = rel / TOP_K_DIVERSITY as f64;
    Ok(DiversityCoherence { diversity, coherence, combined: combined_score(diversity, coherence) })
}

/// 1-based rank of candidate 0 (the gold) by descending score. Ties go to
/// the lower pool index, so the gold wins every tie.
pub fn gold_rank(scores: &[f64]) -> usize {
    let gold = scores[0];
    1 + scores[1..].iter().filter(|&&s| s > gold).count()
}

/// Fraction of ranks `<= k` for each `k`.
pub fn accuracy_at_k(ranks: &[usize], ks: &[usize]) -> Vec<f64> {
    ks.iter().map(|&k| ratio(ranks.iter().filter(|&&r| r <= k).count(), ranks.len().max(1))).collect()
}

/// Names a [`MetricReport`] may carry.
pub const REGISTRY: &[&str] = &[
    "acc_all",
    "acc_in",
    "acc_out",
    "recall_out",
    "accuracy",
    "joint_acc",
    "slot_acc",
    "micro_f1",
    "macro_f1",
    "diversity",
    "coherence",
    "combined",
    "unique_1grams",
    "unique_2grams",
    "unique_3grams",
    "unique_4grams",
    "dev_ppl",
    "final_total_loss",
];

/// `acc@k` names are accepted for any k.
pub fn is_registered(name: &str) -> bool {
    REGISTRY.contains(&name) || name.strip_prefix("acc@").is_some_and(|k| !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit()))
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMeta {
    pub dataset: String,
    pub split: String,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    pub meta: ReportMeta,
}

impl MetricReport {
    pub fn new(meta: ReportMeta) -> Self {
        Self { values: BTreeMap::new(), meta }
    }

    pub fn insert(&mut self, name: &str, value: f64) -> Result<(), MetricError> {
        if !is_registered(name) {
            return Err(MetricError::UnknownMetric(name.to_string()));
        }
        if !value.is_finite() {
            return Err(MetricError::NonFinite { name: name.to_string(), value });
        }
        self.values.insert(name.to_string(), value);
        Ok(())
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        for (name, &value) in &self.values {
            if !is_registered(name) {
                return Err(MetricError::UnknownMetric(name.clone()));
            }
            if !value.is_finite() {
                return Err(MetricError::NonFinite { name: name.clone(), value });
            }
        }
        Ok(())
    }

    /// Values rounded for display.
    pub fn rounded(&self) -> BTreeMap<String, f64> {
        self.values.iter().map(|(k, &v)| (k.clone(), round_half_even(v, 2))).collect()
    }
}

/// Per-metric mean over reports sharing dataset, split and config hash.
/// Only metrics present in every report are kept.
pub fn mean_reports(reports: &[MetricReport]) -> Result<MetricReport, MetricError> {
    let first = reports.first().ok_or(MetricError::Empty)?;
    for r in &reports[1..] {
        if r.meta.dataset != first.meta.dataset {
            return Err(MetricError::MixedMeta("dataset"));
        }
        if r.meta.split != first.meta.split {
            return Err(MetricError::MixedMeta("split"));
        }
        if r.meta.config_hash != first.meta.config_hash {
            return Err(MetricError::MixedMeta("config_hash"));
        }
    }
    let mut out = MetricReport::new(first.meta.clone());
    for name in first.values.keys() {
        let vals: Option<Vec<f64>> = reports.iter().map(|r| r.values.get(name).copied()).collect();
        if let Some(vals) = vals {
            out.values.insert(name.clone(), vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    Ok(out)
}

/// Rounds to `digits` decimals, ties to even. Ties are decided on the
/// shortest decimal representation, so `0.125` rounds to `0.12`.
pub fn round_half_even(x: f64, digits: u32) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let scale = num_traits::Float::powi(10.0f64, digits as i32);
    let y = x * scale;
    let floor = num_traits::Float::floor(y);
    let frac = y - floor;
    let eps = 1e-9 * num_traits::Float::abs(y).max(1.0);
    let r = if (frac - 0.5).abs() <= eps {
        if floor % 2.0 == 0.0 {
            floor
        } else {
            floor + 1.0
        }
    } else {
        num_traits::Float::round(y)
    };
    r / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    fn state(pairs: &[(&str, &str)]) -> State {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn classification_basics() {
        let m = classification_metrics(&[0, 1, 2], &[0, 1, 2], 2).unwrap();
        assert_eq!((m.acc_all, m.acc_in, m.acc_out, m.recall_out), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(classification_metrics(&[0, 1], &[0, 1], 2), Err(MetricError::NoOod));
        assert_eq!(classification_metrics(&[], &[], 2), Err(MetricError::Empty));
        // in-domain confusion still counts as "in" for the binary view
        let m = classification_metrics(&[1, 0, 2, 0], &[0, 0, 2, 2], 2).unwrap();
        assert_eq!(m.acc_all, 0.5);
        assert_eq!(m.acc_in, 0.5);
        assert_eq!(m.acc_out, 0.75);
        assert_eq!(m.recall_out, 0.5);
    }

    #[test]
    fn state_accuracy_hand_counts() {
        let g = vec![state(&[("hotel-area", "north"), ("hotel-price", "cheap")]), state(&[("hotel-area", "north"), ("hotel-price", "none")])];
        let p = vec![state(&[("hotel-area", "north"), ("hotel-price", "cheap")]), state(&[("hotel-area", "south"), ("hotel-price", "none")])];
        assert_eq!(joint_and_slot_accuracy(&p, &g).unwrap(), StateAccuracy { joint: 0.5, slot: 0.75 });
        let four_wrong: Vec<State> = (0..4).map(|_| state(&[("a-x", "1"), ("a-y", "0")])).collect();
        let four_gold: Vec<State> = (0..4).map(|_| state(&[("a-x", "1"), ("a-y", "1")])).collect();
        assert_eq!(joint_and_slot_accuracy(&four_wrong, &four_gold).unwrap(), StateAccuracy { joint: 0.0, slot: 0.5 });
        let bad = vec![state(&[("a-x", "1")])];
        assert_eq!(joint_and_slot_accuracy(&bad, &four_gold[..1]), Err(MetricError::KeyMismatch { turn: 0 }));
    }

    #[test]
    fn f1_closed_forms() {
        let golds: Vec<_> = (0..10).map(|i| if i % 2 == 0 { set(&[0]) } else { set(&[]) }).collect();
        let preds: Vec<_> = (0..10).map(|_| set(&[0])).collect();
        let f = f1_scores(&preds, &golds, 1).unwrap();
        assert!((f.micro - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1_scores(&golds, &golds, 1).unwrap().micro, 1.0);
        // a label nobody uses drags macro down
        assert_eq!(f1_scores(&golds, &golds, 2).unwrap().macro_, 0.5);
        assert!(f1_scores(&[set(&[3])], &[set(&[])], 2).is_err());
        assert!(active_labels(&[0.49; 5], 0.5).is_empty());
    }

    #[test]
    fn ngram_examples() {
        assert_eq!(unique_ngrams(&["a b a b"], 2).unwrap(), 2);
        assert_eq!(unique_ngrams(&[""], 3).unwrap(), 0);
        assert_eq!(unique_ngrams(&["Hello, world"], 1).unwrap(), 3);
        assert!(unique_ngrams(&["x"], 0).is_err());
    }

    #[test]
    fn combined_score_and_degenerate_top10() {
        assert!((combined_score(7.92, 0.730) - 15.22).abs() < 1e-9);
        let top: Vec<(&str, BTreeSet<String>, f64)> = (0..10).map(|_| ("ok", ["inform".to_string()].into(), 1.0)).collect();
        let dc = diversity_coherence(&top).unwrap();
        assert_eq!((dc.diversity, dc.coherence, dc.combined), (1.0, 1.0, 11.0));
        assert!(diversity_coherence(&top[..9]).is_err());
    }

    #[test]
    fn ranks_and_k() {
        assert_eq!(gold_rank(&[0.5, 0.5, 0.9, 0.1]), 2);
        assert_eq!(gold_rank(&[1.0; 100]), 1);
        assert_eq!(accuracy_at_k(&[1, 2, 100], &[1, 2, 100]), vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn rounding() {
        assert_eq!(round_half_even(0.125, 2), 0.12);
        assert_eq!(round_half_even(0.135, 2), 0.14);
        assert_eq!(round_half_even(15.2249, 2), 15.22);
        assert_eq!(round_half_even(-1.005, 2), -1.0);
    }

    #[test]
    fn reports() {
        let meta = ReportMeta { dataset: "toy".into(), split: "test".into(), seed: 1, config_hash: "abc".into() };
        let mut a = MetricReport::new(meta.clone());
        a.insert("acc@1", 0.5).unwrap();
        a.insert("acc_all", 1.0).unwrap();
        assert!(a.insert("bogus", 1.0).is_err());
        assert!(a.insert("acc_in", f64::NAN).is_err());
        let mut b = MetricReport::new(meta);
        b.insert("acc@1", 1.0).unwrap();
        let m = mean_reports(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.values.len(), 1);
        assert_eq!(m.values["acc@1"], 0.75);
        b.meta.config_hash = "other".into();
        assert_eq!(mean_reports(&[a, b]), Err(MetricError::MixedMeta("config_hash")));
    }

    proptest! {
        #[test]
        fn ngrams_permutation_invariant(mut rs in proptest::collection::vec("[a-c ,.]{0,12}", 0..6), n in 1usize..4) {
            let before = unique_ngrams(&rs, n).unwrap();
            rs.reverse();
            prop_assert_eq!(before, unique_ngrams(&rs, n).unwrap());
        }

        #[test]
        fn joint_never_exceeds_slot(bits in proptest::collection::vec((0u8..3, 0u8..3, 0u8..3, 0u8..3), 1..10)) {
            let mk = |a: u8, b: u8| state(&[("d-a", &a.to_string()), ("d-b", &b.to_string())]);
            let preds: Vec<_> = bits.iter().map(|t| mk(t.0, t.1)).collect();
            let golds: Vec<_> = bits.iter().map(|t| mk(t.2, t.3)).collect();
            let acc = joint_and_slot_accuracy(&preds, &golds).unwrap();
            prop_assert!(acc.joint <= acc.slot);
        }

        #[test]
        fn f1_label_permutation(sets in proptest::collection::vec((proptest::collection::btree_set(0usize..4, 0..4), proptest::collection::btree_set(0usize..4, 0..4)), 1..12)) {
            let perm = [2usize, 0, 3, 1];
            let (p, g): (Vec<_>, Vec<_>) = sets.iter().cloned().unzip();
            let mapped = |v: &Vec<BTreeSet<usize>>| v.iter().map(|s| s.iter().map(|&l| perm[l]).collect()).collect::<Vec<BTreeSet<usize>>>();
            let a = f1_scores(&p, &g, 4).unwrap();
            let b = f1_scores(&mapped(&p), &mapped(&g), 4).unwrap();
            prop_assert!((a.micro - b.micro).abs() < 1e-12);
            prop_assert!((a.macro_ - b.macro_).abs() < 1e-12);
        }
    }
}

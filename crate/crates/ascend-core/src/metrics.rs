//! Survival evaluation: concordance, Breslow baseline hazard, Brier score,
//! the per-outcome report, and embedding-neighborhood export.

use crate::events::{Outcome, OUTCOMES};
use crate::finetune::FitSample;
use crate::model::{score_sequences, ModelError, ModelParams};
use crate::phenomap::{PhenomapError, Vocabulary};
use crate::seqbuild::TokenSequence;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error("no events in the training data; baseline hazard unestimable")]
    NoTrainingEvents,
    #[error("input arrays disagree in length")]
    LengthMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] PhenomapError),
}

/// How tied risk scores count in the concordance numerator: the literal
/// indicator (ties score zero) or the conventional half credit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TieHandling {
    Literal,
    HalfCredit,
}

/// Concordance index over comparable pairs `(i, j)` with `T_i < T_j` and
/// subject `i` experiencing the event. Under literal tie handling a batch
/// whose comparable pairs are all score-tied carries no ranking information
/// and reports [`MetricsError::NoComparablePairs`].
pub fn c_index(
    times: &[f64],
    events: &[bool],
    scores: &[f64],
    ties: TieHandling,
) -> Result<f64, MetricsError> {
    let n = times.len();
    if events.len() != n || scores.len() != n {
        return Err(MetricsError::LengthMismatch);
    }
    // iterate over groups of equal time, comparing each event against every
    // strictly later subject
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).expect("finite times"));

    let mut comparable = 0u64;
    let mut tied = 0u64;
    let mut concordant = 0.0f64;
    let mut g0 = 0usize;
    while g0 < n {
        let mut g1 = g0;
        while g1 < n && times[order[g1]] == times[order[g0]] {
            g1 += 1;
        }
        for &i in &order[g0..g1] {
            if !events[i] {
                continue;
            }
            for &j in &order[g1..] {
                comparable += 1;
                if scores[i] > scores[j] {
                    concordant += 1.0;
                } else if scores[i] == scores[j] {
                    tied += 1;
                    if ties == TieHandling::HalfCredit {
                        concordant += 0.5;
                    }
                }
            }
        }
        g0 = g1;
    }
    if comparable == 0 {
        return Err(MetricsError::NoComparablePairs);
    }
    if ties == TieHandling::Literal && tied == comparable {
        return Err(MetricsError::NoComparablePairs);
    }
    Ok(concordant / comparable as f64)
}

/// Cumulative baseline hazard at `horizon` by the Breslow estimator over the
/// training sample, then `S_i = exp(-H0 * exp(score_i))` per eval subject.
pub fn breslow_survival(
    train_scores: &[f64],
    train_times: &[f64],
    train_events: &[bool],
    eval_scores: &[f64],
    horizon: f64,
) -> Result<Vec<f64>, MetricsError> {
    let n = train_times.len();
    if train_scores.len() != n || train_events.len() != n {
        return Err(MetricsError::LengthMismatch);
    }
    if !train_events.iter().any(|&e| e) {
        return Err(MetricsError::NoTrainingEvents);
    }
    let mut h0 = 0.0f64;
    for i in 0..n {
        if !train_events[i] || train_times[i] > horizon {
            continue;
        }
        let risk_sum: f64 = (0..n)
            .filter(|&j| train_times[j] >= train_times[i])
            .map(|j| train_scores[j].exp())
            .sum();
        h0 += 1.0 / risk_sum;
    }
    Ok(eval_scores.iter().map(|&s| (-h0 * s.exp()).exp()).collect())
}

/// Literal Brier score at the horizon:
/// `(1/n) * sum_i (S_i - 1[T_i > t])^2`. Subjects censored before `t`
/// contribute with indicator 0; the formula carries that bias knowingly.
pub fn brier_score(survival_probs: &[f64], times: &[f64], horizon: f64) -> f64 {
    debug_assert_eq!(survival_probs.len(), times.len());
    let n = survival_probs.len().max(1);
    survival_probs
        .iter()
        .zip(times)
        .map(|(&s, &t)| {
            let indicator = if t > horizon { 1.0 } else { 0.0 };
            (s - indicator) * (s - indicator)
        })
        .sum::<f64>()
        / n as f64
}

/// Brier score with the survival indicator taken from (time, event) labels
/// whose censored times are capped at the outcome window: an event inside
/// the window scores 0, a record censored at or after the horizon counts as
/// a survivor, and early-censored records keep the literal formula's
/// indicator-0 reading (its documented bias).
pub fn brier_score_labeled(
    survival_probs: &[f64],
    times: &[f64],
    events: &[bool],
    horizon: f64,
) -> f64 {
    debug_assert_eq!(survival_probs.len(), times.len());
    let n = survival_probs.len().max(1);
    survival_probs
        .iter()
        .zip(times.iter().zip(events))
        .map(|(&s, (&t, &e))| {
            let survived = if e { t > horizon } else { t >= horizon };
            let indicator = if survived { 1.0 } else { 0.0 };
            (s - indicator) * (s - indicator)
        })
        .sum::<f64>()
        / n as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeReport {
    pub outcome: Outcome,
    /// None when the concordance is unavailable (no comparable pairs or a
    /// degenerate constant scorer under literal tie handling).
    pub c_index: Option<f64>,
    pub brier: Option<f64>,
    pub events: u64,
    pub n: u64,
    pub event_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizon_days: f64,
    pub outcomes: Vec<OutcomeReport>,
    pub mean_c_index: Option<f64>,
}

/// Score test samples with the model (eval mode) and assemble the report:
/// per-outcome C-index, Brier at the horizon via a Breslow baseline fitted
/// on the training sample, event counts and rates, plus the mean C-index
/// over outcomes with an available value.
pub fn evaluate(
    params: &ModelParams<f32>,
    test: &[FitSample],
    train: &[FitSample],
    horizon: f64,
    ties: TieHandling,
) -> Result<MetricsReport, MetricsError> {
    let test_scores = score_all(params, test)?;
    let train_scores = score_all(params, train)?;
    let mut outcomes = Vec::with_capacity(OUTCOMES.len());
    for (k, outcome) in OUTCOMES.iter().enumerate() {
        let times: Vec<f64> = test.iter().map(|s| s.times[k]).collect();
        let events: Vec<bool> = test.iter().map(|s| s.events[k]).collect();
        let scores: Vec<f64> = test_scores.iter().map(|row| row[k]).collect();
        let c = match c_index(&times, &events, &scores, ties) {
            Ok(v) => Some(v),
            Err(MetricsError::NoComparablePairs) => None,
            Err(other) => return Err(other),
        };
        let tr_times: Vec<f64> = train.iter().map(|s| s.times[k]).collect();
        let tr_events: Vec<bool> = train.iter().map(|s| s.events[k]).collect();
        let tr_scores: Vec<f64> = train_scores.iter().map(|row| row[k]).collect();
        let brier = match breslow_survival(&tr_scores, &tr_times, &tr_events, &scores, horizon) {
            Ok(surv) => Some(brier_score_labeled(&surv, &times, &events, horizon)),
            Err(MetricsError::NoTrainingEvents) => None,
            Err(other) => return Err(other),
        };
        let n_events = events.iter().filter(|&&e| e).count() as u64;
        let n = test.len() as u64;
        outcomes.push(OutcomeReport {
            outcome: *outcome,
            c_index: c,
            brier,
            events: n_events,
            n,
            event_rate: if n > 0 { n_events as f64 / n as f64 } else { 0.0 },
        });
    }
    let available: Vec<f64> = outcomes.iter().filter_map(|o| o.c_index).collect();
    let mean_c_index = if available.is_empty() {
        None
    } else {
        Some(available.iter().sum::<f64>() / available.len() as f64)
    };
    Ok(MetricsReport { horizon_days: horizon, outcomes, mean_c_index })
}

/// Model scores for each sample, batched; row order follows input order.
pub fn score_all(
    params: &ModelParams<f32>,
    samples: &[FitSample],
) -> Result<Vec<[f64; 5]>, MetricsError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let refs: Vec<&TokenSequence> = chunk.iter().map(|s| &s.seq).collect();
        let scores = score_sequences(params, &refs)?;
        for row in scores.data().chunks(5) {
            out.push([
                row[0] as f64,
                row[1] as f64,
                row[2] as f64,
                row[3] as f64,
                row[4] as f64,
            ]);
        }
    }
    Ok(out)
}

/// Plain-text table mirroring the usual survival-report layout.
pub fn render_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>8} {:>8} {:>12} {:>7}\n",
        "Outcome", "C-index", "Brier", "Events", "Rate"
    ));
    for row in &report.outcomes {
        let c = row.c_index.map(|v| format!("{v:.3}")).unwrap_or_else(|| "--".into());
        let b = row.brier.map(|v| format!("{v:.3}")).unwrap_or_else(|| "--".into());
        out.push_str(&format!(
            "{:<10} {:>8} {:>8} {:>12} {:>6.1}%\n",
            row.outcome.name(),
            c,
            b,
            format!("{}/{}", row.events, row.n),
            row.event_rate * 100.0
        ));
    }
    let mean =
        report.mean_c_index.map(|v| format!("{v:.3}")).unwrap_or_else(|| "--".into());
    out.push_str(&format!("{:<10} {:>8} {:>8} {:>12} {:>7}\n", "Average", mean, "--", "--", "--"));
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Neighbor {
    pub token: String,
    pub cosine: f64,
}

/// The `k` nearest tokens to `token` by cosine similarity of their input
/// embeddings, descending; the query itself is excluded and exact ties
/// break toward the smaller token id.
pub fn embedding_neighbors(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    token: &str,
    k: usize,
) -> Result<Vec<Neighbor>, MetricsError> {
    if !vocab.contains(token) {
        return Err(MetricsError::Vocab(PhenomapError::UnknownToken(token.to_string())));
    }
    let id = vocab.id_for(token) as usize;
    let h = params.token_emb.shape()[1];
    let row = |i: usize| &params.token_emb.data()[i * h..(i + 1) * h];
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    let query = row(id);
    let qn = norm(query);
    let mut sims: Vec<(usize, f64)> = Vec::with_capacity(vocab.len() - 1);
    for other in 0..vocab.len() {
        if other == id {
            continue;
        }
        let r = row(other);
        let dot: f64 = query.iter().zip(r).map(|(&a, &b)| (a as f64) * (b as f64)).sum();
        let denom = qn * norm(r);
        let cos = if denom > 0.0 { dot / denom } else { 0.0 };
        sims.push((other, cos));
    }
    sims.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite cosine").then(a.0.cmp(&b.0)));
    Ok(sims
        .into_iter()
        .take(k)
        .map(|(i, cos)| Neighbor {
            token: vocab.token_for(i as u32).expect("id in range").to_string(),
            cosine: cos,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking_scores_one() {
        let c = c_index(
            &[1.0, 2.0, 3.0],
            &[true, true, true],
            &[3.0, 2.0, 1.0],
            TieHandling::Literal,
        )
        .unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn hand_case_three_quarters() {
        // T=[1,2,3,4], events=[1,0,1,1], scores=[4,3,1,2]: comparable pairs
        // (1,2),(1,3),(1,4),(3,4); only (3,4) discordant.
        let c = c_index(
            &[1.0, 2.0, 3.0, 4.0],
            &[true, false, true, true],
            &[4.0, 3.0, 1.0, 2.0],
            TieHandling::Literal,
        )
        .unwrap();
        assert!((c - 0.75).abs() < 1e-12);
    }

    #[test]
    fn censored_only_has_no_comparable_pairs() {
        let err = c_index(
            &[1.0, 2.0, 3.0],
            &[false, false, false],
            &[1.0, 2.0, 3.0],
            TieHandling::Literal,
        )
        .unwrap_err();
        assert!(matches!(err, MetricsError::NoComparablePairs));
    }

    #[test]
    fn constant_scores_are_unavailable_literal_but_half_under_tie_flag() {
        let times = [1.0, 2.0, 3.0, 4.0];
        let events = [true, true, false, true];
        let scores = [0.5, 0.5, 0.5, 0.5];
        assert!(matches!(
            c_index(&times, &events, &scores, TieHandling::Literal),
            Err(MetricsError::NoComparablePairs)
        ));
        let c = c_index(&times, &events, &scores, TieHandling::HalfCredit).unwrap();
        assert_eq!(c, 0.5);
    }

    #[test]
    fn reversal_and_monotone_invariance() {
        let mut r = crate::rng::derive(1, "metrics.test", "inv");
        for _ in 0..20 {
            let n = 3 + crate::rng::below(&mut r, 30) as usize;
            let times: Vec<f64> =
                (0..n).map(|_| (crate::rng::below(&mut r, 50) + 1) as f64).collect();
            let events: Vec<bool> = (0..n).map(|_| crate::rng::bernoulli(&mut r, 0.6)).collect();
            let scores: Vec<f64> = (0..n).map(|_| crate::rng::unit_f64(&mut r)).collect();
            let Ok(c) = c_index(&times, &events, &scores, TieHandling::Literal) else {
                continue;
            };
            let neg: Vec<f64> = scores.iter().map(|&s| -s).collect();
            let c_neg = c_index(&times, &events, &neg, TieHandling::Literal).unwrap();
            assert!((c + c_neg - 1.0).abs() < 1e-12, "reversal failed");
            // strictly increasing transform preserves the ranking
            let warped: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp() + 1.0).collect();
            let c_warp = c_index(&times, &events, &warped, TieHandling::Literal).unwrap();
            assert_eq!(c, c_warp);
        }
    }

    /// The exhaustive oracle: a word-for-word transcription of the ratio of
    /// indicator sums over all ordered pairs.
    fn c_index_oracle(times: &[f64], events: &[bool], scores: &[f64]) -> Option<f64> {
        let n = times.len();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            for j in 0..n {
                if times[i] < times[j] && events[i] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    }
                }
            }
        }
        (den > 0.0).then_some(num / den)
    }

    #[test]
    fn grouped_implementation_matches_oracle_on_100_instances() {
        let mut r = crate::rng::derive(2, "metrics.test", "oracle");
        let mut checked = 0;
        while checked < 100 {
            let n = 2 + crate::rng::below(&mut r, 49) as usize;
            // integer times force plenty of ties
            let times: Vec<f64> =
                (0..n).map(|_| (crate::rng::below(&mut r, 12) + 1) as f64).collect();
            let events: Vec<bool> = (0..n).map(|_| crate::rng::bernoulli(&mut r, 0.5)).collect();
            let scores: Vec<f64> = (0..n).map(|_| crate::rng::unit_f64(&mut r)).collect();
            let oracle = c_index_oracle(&times, &events, &scores);
            let ours = c_index(&times, &events, &scores, TieHandling::Literal).ok();
            match (oracle, ours) {
                (Some(a), Some(b)) => assert_eq!(a, b, "n={n}"),
                (None, None) => {}
                // continuous scores make all-tied batches impossible, so the
                // two unavailability conditions coincide
                (a, b) => panic!("oracle {a:?} vs ours {b:?}"),
            }
            checked += 1;
        }
    }

    #[test]
    fn breslow_hand_case_and_monotonicity() {
        // one event at t=1 within a risk set of two, both scores 0:
        // H0 = 1/2, S = exp(-0.5)
        let surv = breslow_survival(&[0.0, 0.0], &[1.0, 2.0], &[true, false], &[0.0], 1.5)
            .unwrap();
        assert!((surv[0] - (-0.5f64).exp()).abs() < 1e-12);

        // no events before the horizon: S = 1
        let surv =
            breslow_survival(&[0.0, 0.0], &[5.0, 6.0], &[true, false], &[0.3], 1.0).unwrap();
        assert_eq!(surv[0], 1.0);

        // S non-increasing in the horizon
        let mut prev = 1.0;
        for t in [0.5, 1.5, 2.5, 3.5] {
            let s = breslow_survival(
                &[0.2, -0.1, 0.4],
                &[1.0, 2.0, 3.0],
                &[true, true, false],
                &[0.0],
                t,
            )
            .unwrap()[0];
            assert!(s <= prev + 1e-12, "not monotone at {t}");
            prev = s;
        }

        assert!(matches!(
            breslow_survival(&[0.0], &[1.0], &[false], &[0.0], 1.0),
            Err(MetricsError::NoTrainingEvents)
        ));
    }

    #[test]
    fn labeled_brier_counts_window_survivors() {
        // censored exactly at the horizon is a survivor; an event at the
        // horizon is not; early censoring keeps the literal indicator 0
        let probs = [0.9, 0.9, 0.9];
        let times = [365.0, 365.0, 100.0];
        let events = [false, true, false];
        let expected = ((0.9f64 - 1.0).powi(2) + 0.9f64.powi(2) + 0.9f64.powi(2)) / 3.0;
        let got = brier_score_labeled(&probs, &times, &events, 365.0);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn brier_cases() {
        // perfect indicator predictions
        assert_eq!(brier_score(&[1.0, 0.0], &[2.0, 0.5], 1.0), 0.0);
        // constant half
        assert!((brier_score(&[0.5, 0.5, 0.5], &[2.0, 0.5, 3.0], 1.0) - 0.25).abs() < 1e-12);
        // hand case: ((0.8-1)^2 + (0.3-0)^2)/2 = 0.065
        assert!((brier_score(&[0.8, 0.3], &[2.0, 0.5], 1.0) - 0.065).abs() < 1e-12);
    }

    #[test]
    fn neighbors_exclude_query_and_honor_k() {
        use crate::model::{init_model, ModelConfig};
        use crate::phenomap::{build_vocabulary, parse_mapping, CorpusScan};
        let table = parse_mapping(
            "icd_code\ticd_system\tccs_category\tphenotype\n\
             A\tICD10\tC1\tPHENO_A\n\
             B\tICD10\tC2\tPHENO_B\n\
             C\tICD10\tC3\tPHENO_C\n",
        )
        .unwrap();
        let vocab = build_vocabulary(&table, &CorpusScan::default()).unwrap();
        let config = ModelConfig {
            vocab_size: vocab.len(),
            hidden: 8,
            layers: 1,
            heads: 2,
            intermediate: 16,
            max_len: 8,
            dropout_p: 0.0,
            head_dims: (4, 2),
            head_dropout: 0.0,
        };
        let params = init_model::<f32>(&config, 5).unwrap();
        let neighbors = embedding_neighbors(&params, &vocab, "PHENO_A", 5).unwrap();
        assert_eq!(neighbors.len(), 5);
        assert!(neighbors.iter().all(|n| n.token != "PHENO_A"));
        for w in neighbors.windows(2) {
            assert!(w[0].cosine >= w[1].cosine);
        }
        assert!(embedding_neighbors(&params, &vocab, "PHENO_A", 0).unwrap().is_empty());
        assert!(matches!(
            embedding_neighbors(&params, &vocab, "NOT_A_TOKEN", 3),
            Err(MetricsError::Vocab(PhenomapError::UnknownToken(_)))
        ));
    }
}

//! Published results from full-scale training on real data, kept as
//! documentation targets.
//!
//! None of these are reproducible here: they need a pre-training corpus of
//! hundreds of millions of tweets and licensed benchmark datasets. Nothing
//! in the test suite asserts them; they exist so reports can print the gap.

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReferenceValue {
    pub key: &'static str,
    pub description: &'static str,
    pub value: f64,
    /// Standard deviation across runs, when published.
    pub std: Option<f64>,
    /// Table or figure the value appears in, by caption.
    pub citation: &'static str,
}

const RESULTS_TABLE: &str = "Table \"Summary of results for accuracy and f1-score\"";
const PROFILING_TABLE: &str = "Table \"Summary of the results obtained in the PAN 20 competition\"";
const TWEETS_FIGURE: &str =
    "Figure \"Evaluation of the performance ... according to the number of tweets considered for each author\"";

pub const REFERENCE_VALUES: &[ReferenceValue] = &[
    ReferenceValue {
        key: "hate_speech.accuracy",
        description: "hate speech detection, sequence classification accuracy",
        value: 0.8275,
        std: Some(0.011),
        citation: RESULTS_TABLE,
    },
    ReferenceValue {
        key: "hate_speech.f1",
        description: "hate speech detection, macro F1",
        value: 0.7728,
        std: Some(0.01),
        citation: RESULTS_TABLE,
    },
    ReferenceValue {
        key: "ner.accuracy",
        description: "named entity recognition, token accuracy",
        value: 0.9622,
        std: Some(0.0036),
        citation: RESULTS_TABLE,
    },
    ReferenceValue {
        key: "profiling.mean.accuracy",
        description: "spreader profiling with mean aggregation, accuracy",
        value: 0.8190,
        std: None,
        citation: PROFILING_TABLE,
    },
    ReferenceValue {
        key: "profiling.mean.precision",
        description: "spreader profiling with mean aggregation, precision",
        value: 0.8015,
        std: None,
        citation: PROFILING_TABLE,
    },
    ReferenceValue {
        key: "profiling.mean.recall",
        description: "spreader profiling with mean aggregation, recall",
        value: 0.7910,
        std: None,
        citation: PROFILING_TABLE,
    },
    ReferenceValue {
        key: "profiling.max.accuracy",
        description: "spreader profiling with max aggregation, accuracy",
        value: 0.7530,
        std: None,
        citation: PROFILING_TABLE,
    },
    ReferenceValue {
        key: "profiling.single_tweet.accuracy",
        description: "spreader profiling from one tweet per author, accuracy lower bound",
        value: 0.74,
        std: None,
        citation: TWEETS_FIGURE,
    },
];

pub fn reference_value(key: &str) -> Option<&'static ReferenceValue> {
    REFERENCE_VALUES.iter().find(|r| r.key == key)
}

/// `key  value (std)  [citation]` lines for reports.
pub fn reference_table() -> String {
    REFERENCE_VALUES
        .iter()
        .map(|r| {
            let v = match r.std {
                Some(s) => crate::finetune::format_mean_std(r.value, s),
                None => format!("{}", r.value),
            };
            format!("{:<34} {:<16} [{}]\n", r.key, v, r.citation)
        })
        .collect()
}

//! Word-accuracy evaluation over labeled samples.

use std::borrow::Borrow;
use std::thread;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::lexicon::levenshtein;
use crate::synthdata::Sample;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub truth: String,
    pub predicted: String,
    pub correct: bool,
    /// edit distance divided by the longer of the two lengths
    pub norm_edit: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub total: usize,
    pub correct: usize,
    /// word accuracy in percent
    pub accuracy: f64,
    pub mean_norm_edit: f64,
    pub records: Vec<EvalRecord>,
}

impl EvalSummary {
    pub fn from_records(records: Vec<EvalRecord>) -> Self {
        let total = records.len();
        let correct = records.iter().filter(|r| r.correct).count();
        let (accuracy, mean_norm_edit) = if total == 0 {
            (0.0, 0.0)
        } else {
            (
                100.0 * correct as f64 / total as f64,
                records.iter().map(|r| r.norm_edit).sum::<f64>() / total as f64,
            )
        };
        EvalSummary {
            total,
            correct,
            accuracy,
            mean_norm_edit,
            records,
        }
    }

    pub fn records_tsv(&self) -> String {
        let mut s = String::from("id\ttruth\tpredicted\tcorrect\tnorm_edit\n");
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.4}\n",
                r.id, r.truth, r.predicted, r.correct as u8, r.norm_edit
            ));
        }
        s
    }
}

pub fn score_prediction(id: &str, truth: &str, predicted: &str) -> EvalRecord {
    let t = truth.to_lowercase();
    let p = predicted.to_lowercase();
    let longest = t.chars().count().max(p.chars().count());
    let norm_edit = if longest == 0 {
        0.0
    } else {
        levenshtein(&t, &p) as f64 / longest as f64
    };
    EvalRecord {
        id: id.to_string(),
        truth: truth.to_string(),
        predicted: predicted.to_string(),
        correct: t == p,
        norm_edit,
    }
}

/// Keeps samples whose ground truth is alphanumeric and at least `min_len`
/// characters long.
pub fn standard_filter<S: Borrow<Sample>>(samples: Vec<S>, min_len: usize) -> Vec<S> {
    samples
        .into_iter()
        .filter(|s| {
            let w = &s.borrow().word;
            w.chars().count() >= min_len && w.chars().all(|c| c.is_ascii_alphanumeric())
        })
        .collect()
}

/// Runs `predict` on every sample using up to `jobs` threads. Records keep
/// the input order.
pub fn evaluate<S, F>(samples: &[S], predict: F, jobs: usize) -> Result<EvalSummary>
where
    S: Borrow<Sample> + Sync,
    F: Fn(&GrayImage) -> Result<String> + Sync,
{
    if samples.is_empty() {
        return Err(Error::input("evaluation set is empty"));
    }
    let jobs = jobs.clamp(1, samples.len());
    let run = |chunk: &[S]| -> Result<Vec<EvalRecord>> {
        chunk
            .iter()
            .map(|s| {
                let s = s.borrow();
                Ok(score_prediction(&s.id, &s.word, &predict(&s.image)?))
            })
            .collect()
    };
    let records = if jobs == 1 {
        run(samples)?
    } else {
        let size = samples.len().div_ceil(jobs);
        let parts: Vec<Result<Vec<EvalRecord>>> = thread::scope(|scope| {
            let handles: Vec<_> = samples.chunks(size).map(|c| scope.spawn(move || run(c))).collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(samples.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    Ok(EvalSummary::from_records(records))
}

//! Scalar output metrics over answer positions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, ValueId};

/// Where to read the answer in a flattened `[rows, vocab]` logits tensor and
/// which tokens count as correct/incorrect there.
#[derive(Clone, Copy, Debug)]
pub struct AnswerSpec {
    /// Flat row index (`seq * seq_len + answer_pos`).
    pub row: usize,
    pub correct: usize,
    pub incorrect: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Logit of the correct token at the answer position.
    AnswerLogit,
    /// Correct-token logit minus designated-incorrect-token logit.
    LogitDiff,
    /// KL of the reference distribution against the candidate, at the answer
    /// position.
    KlToReference,
}

fn validate(
    logits: &Tensor,
    answers: &[AnswerSpec],
    kind: MetricKind,
    reference: Option<&Tensor>,
) -> Result<()> {
    if answers.is_empty() {
        return Err(Error::InvalidArgument("no answer positions".into()));
    }
    let vocab = logits.cols();
    for a in answers {
        if a.row >= logits.rows() || a.correct >= vocab {
            return Err(Error::InvalidArgument(format!(
                "answer spec out of range: row {} correct {}",
                a.row, a.correct
            )));
        }
        if let Some(inc) = a.incorrect {
            if inc >= vocab {
                return Err(Error::InvalidArgument(format!("incorrect token {inc} out of range")));
            }
        } else if kind == MetricKind::LogitDiff {
            return Err(Error::InvalidArgument(
                "logit_diff requires an incorrect token".into(),
            ));
        }
    }
    match (kind, reference) {
        (MetricKind::KlToReference, None) => Err(Error::InvalidArgument(
            "kl_to_reference requires reference logits".into(),
        )),
        (MetricKind::KlToReference, Some(r)) if r.shape() != logits.shape() => {
            Err(Error::ShapeMismatch {
                op: "output_metric",
                detail: format!("reference {:?} vs logits {:?}", r.shape(), logits.shape()),
            })
        }
        (k, Some(_)) if k != MetricKind::KlToReference => Err(Error::InvalidArgument(
            "reference logits only apply to kl_to_reference".into(),
        )),
        _ => Ok(()),
    }
}

/// Mean metric value over a batch of answer positions.
pub fn output_metric(
    logits: &Tensor,
    answers: &[AnswerSpec],
    kind: MetricKind,
    reference: Option<&Tensor>,
) -> Result<f64> {
    validate(logits, answers, kind, reference)?;
    let vocab = logits.cols();
    let n = answers.len() as f64;
    let mut total = 0.0;
    for a in answers {
        let row = &logits.data()[a.row * vocab..(a.row + 1) * vocab];
        total += match kind {
            MetricKind::AnswerLogit => row[a.correct],
            MetricKind::LogitDiff => row[a.correct] - row[a.incorrect.unwrap()],
            MetricKind::KlToReference => {
                let r = reference.unwrap();
                let ref_row = &r.data()[a.row * vocab..(a.row + 1) * vocab];
                kl_rows(ref_row, row)
            }
        };
    }
    Ok(total / n)
}

fn kl_rows(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Differentiable version: builds the same metric as a scalar tape node on
/// top of a logits value.
pub fn metric_on_tape(
    tape: &mut Tape,
    logits: ValueId,
    answers: &[AnswerSpec],
    kind: MetricKind,
    reference: Option<&Tensor>,
) -> Result<ValueId> {
    validate(tape.value(logits), answers, kind, reference)?;
    let shape = tape.value(logits).shape().to_vec();
    let (rows, vocab) = (shape[0], shape[1]);
    let n = answers.len() as f64;
    match kind {
        MetricKind::AnswerLogit | MetricKind::LogitDiff => {
            let mut w = vec![0.0; rows * vocab];
            for a in answers {
                w[a.row * vocab + a.correct] += 1.0 / n;
                if kind == MetricKind::LogitDiff {
                    w[a.row * vocab + a.incorrect.unwrap()] -= 1.0 / n;
                }
            }
            let weights = Tensor::from_vec(shape, w)?;
            tape.weighted_sum(logits, &weights)
        }
        MetricKind::KlToReference => {
            let answer_rows: Vec<usize> = answers.iter().map(|a| a.row).collect();
            let cand = tape.slice_rows(logits, answer_rows.clone())?;
            let r = reference.unwrap();
            let mut ref_rows = Vec::with_capacity(answers.len() * vocab);
            for &row in &answer_rows {
                ref_rows.extend_from_slice(&r.data()[row * vocab..(row + 1) * vocab]);
            }
            let ref_t = Tensor::from_vec(vec![answer_rows.len(), vocab], ref_rows)?;
            let ref_leaf = tape.constant(ref_t);
            tape.kl_divergence_from_logits(ref_leaf, cand)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits() -> Tensor {
        Tensor::matrix(2, 4, vec![2.0, 0.5, -1.0, 0.0, 0.1, 0.2, 0.3, 0.4]).unwrap()
    }

    #[test]
    fn logit_diff_arithmetic() {
        let answers = [AnswerSpec { row: 0, correct: 0, incorrect: Some(1) }];
        let v = output_metric(&logits(), &answers, MetricKind::LogitDiff, None).unwrap();
        assert!((v - 1.5).abs() < 1e-12);
    }

    #[test]
    fn kl_to_identical_logits_is_zero() {
        let l = logits();
        let answers = [
            AnswerSpec { row: 0, correct: 0, incorrect: None },
            AnswerSpec { row: 1, correct: 2, incorrect: None },
        ];
        let v = output_metric(&l, &answers, MetricKind::KlToReference, Some(&l)).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        use rand::Rng;
        let mut rng = crate::util::seeded_rng(11, "kl_nonneg");
        for _ in 0..1000 {
            let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let at = Tensor::matrix(1, 6, a).unwrap();
            let bt = Tensor::matrix(1, 6, b).unwrap();
            let answers = [AnswerSpec { row: 0, correct: 0, incorrect: None }];
            let v = output_metric(&bt, &answers, MetricKind::KlToReference, Some(&at)).unwrap();
            assert!(v >= -1e-12, "KL must be nonnegative, got {v}");
        }
    }

    #[test]
    fn missing_incorrect_token_is_an_error() {
        let answers = [AnswerSpec { row: 0, correct: 0, incorrect: None }];
        assert!(output_metric(&logits(), &answers, MetricKind::LogitDiff, None).is_err());
    }

    #[test]
    fn reference_presence_must_match_kind() {
        let l = logits();
        let answers = [AnswerSpec { row: 0, correct: 0, incorrect: None }];
        assert!(output_metric(&l, &answers, MetricKind::KlToReference, None).is_err());
        assert!(output_metric(&l, &answers, MetricKind::AnswerLogit, Some(&l)).is_err());
    }

    #[test]
    fn tape_metric_agrees_with_value_metric() {
        let l = logits();
        let answers = [
            AnswerSpec { row: 0, correct: 0, incorrect: Some(2) },
            AnswerSpec { row: 1, correct: 3, incorrect: Some(1) },
        ];
        for kind in [MetricKind::AnswerLogit, MetricKind::LogitDiff] {
            let direct = output_metric(&l, &answers, kind, None).unwrap();
            let mut tape = Tape::new();
            let lv = tape.constant(l.clone());
            let m = metric_on_tape(&mut tape, lv, &answers, kind, None).unwrap();
            assert!((tape.value(m).scalar_value().unwrap() - direct).abs() < 1e-12);
        }
        let reference = Tensor::matrix(2, 4, vec![0.3; 8]).unwrap();
        let direct =
            output_metric(&l, &answers, MetricKind::KlToReference, Some(&reference)).unwrap();
        let mut tape = Tape::new();
        let lv = tape.constant(l.clone());
        let m =
            metric_on_tape(&mut tape, lv, &answers, MetricKind::KlToReference, Some(&reference))
                .unwrap();
        assert!((tape.value(m).scalar_value().unwrap() - direct).abs() < 1e-12);
    }
}

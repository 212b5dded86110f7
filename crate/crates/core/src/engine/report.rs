use std::io::Write;

use serde::Serialize;

use super::config::AlgorithmTag;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientRoundRecord {
    pub client_id: usize,
    /// Present only for clients that trained this round.
    pub train_loss: Option<f64>,
    pub test_acc: f64,
    /// 0 for clients without a prompt or not sampled this round.
    pub prompt_drift: f64,
}

/// Outcome of one communication round. Rounds are numbered from 1.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub sampled: Vec<usize>,
    /// Normalized aggregation weights in `sampled` order; empty for Local.
    pub aggregation_weights: Vec<f64>,
    pub clients: Vec<ClientRoundRecord>,
    /// Accuracies averaged with train-shard sizes as weights.
    pub weighted_acc: f64,
    /// Mean prompt drift over the sampled clients.
    pub mean_prompt_drift: f64,
    pub wall_ms: u64,
}

impl RoundReport {
    pub fn mean_train_loss(&self) -> Option<f64> {
        let losses: Vec<f64> = self.clients.iter().filter_map(|c| c.train_loss).collect();
        (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

/// Streams round reports as CSV, one row per client per round, flushing
/// after every round.
pub struct RoundCsvWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> RoundCsvWriter<W> {
    pub const HEADER: [&'static str; 7] = [
        "round",
        "client_id",
        "train_loss",
        "test_acc",
        "weighted_acc",
        "prompt_drift",
        "wall_ms",
    ];

    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(Self::HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, report: &RoundReport) -> Result<()> {
        for c in &report.clients {
            self.inner.write_record([
                report.round.to_string(),
                c.client_id.to_string(),
                c.train_loss.map(|l| l.to_string()).unwrap_or_default(),
                c.test_acc.to_string(),
                report.weighted_acc.to_string(),
                c.prompt_drift.to_string(),
                report.wall_ms.to_string(),
            ])?;
        }
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| crate::Error::Io(std::io::Error::other(e.to_string())))
    }
}

/// Best weighted accuracy over all rounds and the (1-based) round it occurred in.
pub fn best_weighted_accuracy(reports: &[RoundReport]) -> Option<(usize, f64)> {
    reports
        .iter()
        .map(|r| (r.round, r.weighted_acc))
        .fold(None, |best, (round, acc)| match best {
            Some((_, b)) if b >= acc => best,
            _ => Some((round, acc)),
        })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub algorithm: String,
    pub rounds: usize,
    pub final_weighted_acc: Option<f64>,
    pub best_weighted_acc: Option<f64>,
    pub best_round: Option<usize>,
    pub final_mean_train_loss: Option<f64>,
}

impl ExperimentSummary {
    pub fn from_reports(algorithm: AlgorithmTag, reports: &[RoundReport]) -> Self {
        let best = best_weighted_accuracy(reports);
        Self {
            algorithm: algorithm.to_string(),
            rounds: reports.len(),
            final_weighted_acc: reports.last().map(|r| r.weighted_acc),
            best_weighted_acc: best.map(|b| b.1),
            best_round: best.map(|b| b.0),
            final_mean_train_loss: reports.last().and_then(|r| r.mean_train_loss()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(round: usize, acc: f64) -> RoundReport {
        RoundReport {
            round,
            sampled: vec![0],
            aggregation_weights: vec![1.0],
            clients: vec![
                ClientRoundRecord {
                    client_id: 0,
                    train_loss: Some(0.5),
                    test_acc: acc,
                    prompt_drift: 0.25,
                },
                ClientRoundRecord {
                    client_id: 1,
                    train_loss: None,
                    test_acc: acc,
                    prompt_drift: 0.0,
                },
            ],
            weighted_acc: acc,
            mean_prompt_drift: 0.25,
            wall_ms: 0,
        }
    }

    #[test]
    fn csv_rows() {
        let mut w = RoundCsvWriter::new(Vec::new()).unwrap();
        w.write(&report(1, 0.5)).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(
            text,
            "round,client_id,train_loss,test_acc,weighted_acc,prompt_drift,wall_ms\n\
             1,0,0.5,0.5,0.5,0.25,0\n1,1,,0.5,0.5,0,0\n"
        );
    }

    #[test]
    fn best_is_first_maximum() {
        let rs = [report(1, 0.2), report(2, 0.7), report(3, 0.7), report(4, 0.1)];
        assert_eq!(best_weighted_accuracy(&rs), Some((2, 0.7)));
        assert_eq!(best_weighted_accuracy(&[]), None);
        let s = ExperimentSummary::from_reports(AlgorithmTag::PFEDPT, &rs);
        assert_eq!(s.final_weighted_acc, Some(0.1));
        assert_eq!(s.best_round, Some(2));
    }
}

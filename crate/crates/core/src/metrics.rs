//! Seed quality against ground-truth masks.
//!
//! All counts are aggregated over a whole split before any ratio is taken.
//! Label `0` is background and `c + 1` is class `c`.

use std::fmt::Write as _;

use crate::cam::{threshold_seed, LocalizationMap};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = match (tp + fp, tp + fn_) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            (p, _) => tp as f64 / p as f64,
        };
        let recall = if tp + fn_ == 0 {
            1.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// `labels x labels` pixel counts indexed `[gt][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    labels: usize,
    counts: Vec<u64>,
}

impl Confusion {
    /// `labels` includes background.
    pub fn new(labels: usize) -> Self {
        Self {
            labels,
            counts: vec![0; labels * labels],
        }
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.labels + pred]
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Dimension(format!(
                "mask sizes differ: {} vs {}",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.labels || g >= self.labels {
                return Err(Error::Contract(format!(
                    "label {} outside 0..{}",
                    p.max(g),
                    self.labels
                )));
            }
            self.counts[g * self.labels + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.labels != self.labels {
            return Err(Error::Dimension("confusion label counts differ".into()));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn true_positives(&self, label: usize) -> u64 {
        self.count(label, label)
    }

    pub fn false_positives(&self, label: usize) -> u64 {
        (0..self.labels).map(|g| self.count(g, label)).sum::<u64>() - self.count(label, label)
    }

    pub fn false_negatives(&self, label: usize) -> u64 {
        (0..self.labels).map(|p| self.count(label, p)).sum::<u64>() - self.count(label, label)
    }

    pub fn prf(&self, label: usize) -> Prf {
        Prf::from_counts(
            self.true_positives(label),
            self.false_positives(label),
            self.false_negatives(label),
        )
    }

    /// Micro average over the foreground labels.
    pub fn foreground_prf(&self) -> Prf {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for l in 1..self.labels {
            tp += self.true_positives(l);
            fp += self.false_positives(l);
            fn_ += self.false_negatives(l);
        }
        Prf::from_counts(tp, fp, fn_)
    }

    /// Mean IoU over labels present in either prediction or ground truth;
    /// `None` when nothing was counted.
    pub fn miou(&self) -> Option<f64> {
        let ious: Vec<f64> = (0..self.labels)
            .filter_map(|l| {
                let tp = self.true_positives(l);
                let union = tp + self.false_positives(l) + self.false_negatives(l);
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Precision, recall and F1 of one class on a single mask pair.
pub fn prf(seed: &[u8], gt: &[u8], class_id: u8) -> Result<Prf> {
    if seed.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "mask sizes differ: {} vs {}",
            seed.len(),
            gt.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in seed.iter().zip(gt) {
        match (p == class_id, g == class_id) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// Split-level mIoU; `labels` includes background.
pub fn miou(seeds: &[&[u8]], gts: &[&[u8]], labels: usize) -> Result<f64> {
    if seeds.is_empty() {
        return Err(Error::Contract("miou of an empty split".into()));
    }
    if seeds.len() != gts.len() {
        return Err(Error::Dimension("seed and gt lists differ in length".into()));
    }
    let mut conf = Confusion::new(labels);
    for (s, g) in seeds.iter().zip(gts) {
        conf.add(s, g)?;
    }
    conf.miou()
        .ok_or_else(|| Error::Contract("miou: no labelled pixels".into()))
}

/// `0.05, 0.10, ..., 0.95`.
pub fn default_taus() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub miou: f64,
}

/// One localization map per sample with its present classes and gt mask.
pub struct EvalItem<'a> {
    pub map: &'a LocalizationMap,
    pub present: &'a [usize],
    pub gt: &'a [u8],
}

pub fn confusion_at(items: &[EvalItem<'_>], labels: usize, tau: f64) -> Result<Confusion> {
    let mut conf = Confusion::new(labels);
    for it in items {
        let seed = threshold_seed(it.map, it.present, tau)?;
        conf.add(&seed.labels, it.gt)?;
    }
    Ok(conf)
}

pub fn threshold_sweep(items: &[EvalItem<'_>], labels: usize, taus: &[f64]) -> Result<Vec<SweepRow>> {
    if items.is_empty() {
        return Err(Error::Contract("threshold sweep over an empty split".into()));
    }
    if let Some(t) = taus.iter().find(|&&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::Contract(format!("threshold {t} outside (0, 1)")));
    }
    taus.iter()
        .map(|&tau| {
            let conf = confusion_at(items, labels, tau)?;
            let p = conf.foreground_prf();
            Ok(SweepRow {
                tau,
                precision: p.precision,
                recall: p.recall,
                f1: p.f1,
                miou: conf.miou().unwrap_or(0.0),
            })
        })
        .collect()
}

fn best_by(rows: &[SweepRow], key: impl Fn(&SweepRow) -> f64) -> Option<SweepRow> {
    // first maximum wins, so ties go to the lower threshold
    rows.iter()
        .copied()
        .fold(None, |best: Option<SweepRow>, r| match best {
            Some(b) if key(&b) >= key(&r) => Some(b),
            _ => Some(r),
        })
}

pub fn best_by_f1(rows: &[SweepRow]) -> Option<SweepRow> {
    best_by(rows, |r| r.f1)
}

pub fn best_by_miou(rows: &[SweepRow]) -> Option<SweepRow> {
    best_by(rows, |r| r.miou)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("tau,precision,recall,f1,miou\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:.2},{:.6},{:.6},{:.6},{:.6}",
            r.tau, r.precision, r.recall, r.f1, r.miou
        );
    }
    out
}

/// Per-label accuracy of `logit > 0` against binary labels.
pub fn multilabel_accuracy(logits: &[f32], labels: &[f32]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Dimension("logit and label counts differ or are empty".into()));
    }
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(&z, &y)| (z > 0.0) == (y > 0.5))
        .count();
    Ok(hits as f64 / logits.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prf_examples() {
        let gt = [1, 1, 0, 1, 0];
        assert_eq!(
            prf(&gt, &gt, 1).unwrap(),
            Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0
            }
        );
        // 2 TP, 2 FP, 2 FN
        let p = prf(&[1, 1, 1, 1, 0, 0], &[1, 1, 0, 0, 1, 1], 1).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
        let p = prf(&[0, 0, 0], &[1, 0, 1], 1).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        let p = prf(&[0, 0], &[0, 0], 1).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        assert!(prf(&[0], &[0, 1], 1).is_err());
    }

    #[test]
    fn miou_examples() {
        let gt = [1u8, 1, 0, 0];
        assert_eq!(miou(&[&gt], &[&gt], 2).unwrap(), 1.0);
        let pred = [0u8; 4];
        assert_eq!(miou(&[&pred], &[&gt], 2).unwrap(), 0.25);
        assert!(miou(&[], &[], 2).is_err());
        // class 2 absent everywhere is excluded
        assert_eq!(miou(&[&gt], &[&gt], 3).unwrap(), 1.0);
    }

    #[test]
    fn best_selectors_prefer_lower_tau_on_ties() {
        let row = |tau, f1, miou| SweepRow {
            tau,
            precision: 0.0,
            recall: 0.0,
            f1,
            miou,
        };
        let rows = [row(0.1, 0.5, 0.2), row(0.2, 0.7, 0.2), row(0.3, 0.7, 0.1)];
        assert_eq!(best_by_f1(&rows).unwrap().tau, 0.2);
        assert_eq!(best_by_miou(&rows).unwrap().tau, 0.1);
        assert_eq!(sweep_csv(&rows).lines().count(), 4);
    }

    #[test]
    fn accuracy_counts_labels() {
        let acc = multilabel_accuracy(&[1.0, -1.0, 2.0, -0.5], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(acc, 0.75);
    }
}

//! Class-balanced P×K batch sampling.

use crate::embedding::LabelVector;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// `P` classes per batch, `K` samples per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    /// Allow drawing with replacement from classes smaller than `K`.
    pub with_replacement: bool,
}

impl BatchPlan {
    pub fn new(classes_per_batch: usize, samples_per_class: usize) -> Result<Self> {
        let plan = Self {
            classes_per_batch,
            samples_per_class,
            with_replacement: false,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes_per_batch < 2 || self.samples_per_class < 2 {
            return Err(Error::InvalidConfiguration(format!(
                "batch plan needs P >= 2 and K >= 2, got P={} K={}",
                self.classes_per_batch, self.samples_per_class
            )));
        }
        Ok(())
    }
}

/// Splits the samples behind `labels` into `P×K` batches for one epoch.
///
/// The epoch has `max(1, N / (P·K))` batches. Each batch takes the `P`
/// least-visited classes (random tie-break), so per-class visit counts never
/// drift apart by more than `K`. A class whose queue runs dry is reshuffled.
pub fn balanced_batches(
    labels: &LabelVector,
    plan: &BatchPlan,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<usize>>> {
    plan.validate()?;
    let (p, k) = (plan.classes_per_batch, plan.samples_per_class);
    let mut members = vec![Vec::new(); labels.num_classes()];
    for (i, &y) in labels.as_slice().iter().enumerate() {
        members[y].push(i);
    }
    let present: Vec<usize> = (0..members.len())
        .filter(|&c| !members[c].is_empty())
        .collect();
    if present.len() < p {
        return Err(Error::InvalidConfiguration(format!(
            "batch plan wants {p} classes but only {} are present",
            present.len()
        )));
    }
    if !plan.with_replacement {
        if let Some(&c) = present.iter().find(|&&c| members[c].len() < k) {
            return Err(Error::InsufficientClassSamples {
                class: c,
                available: members[c].len(),
                required: k,
            });
        }
    }

    let mut queues: Vec<Vec<usize>> = members
        .iter()
        .map(|m| {
            let mut q = m.clone();
            rng.shuffle(&mut q);
            q
        })
        .collect();
    let mut cursor = vec![0usize; members.len()];
    let mut visits = vec![0usize; members.len()];
    let batches = (labels.len() / plan.batch_size()).max(1);

    let mut out = Vec::with_capacity(batches);
    for _ in 0..batches {
        let mut order = present.clone();
        rng.shuffle(&mut order);
        order.sort_by_key(|&c| visits[c]);
        let mut chosen = order[..p].to_vec();
        chosen.sort_unstable();

        let mut batch = Vec::with_capacity(plan.batch_size());
        for &c in &chosen {
            if members[c].len() < k {
                for _ in 0..k {
                    batch.push(members[c][rng.below(members[c].len())]);
                }
            } else {
                if queues[c].len() - cursor[c] < k {
                    let mut fresh = members[c].clone();
                    rng.shuffle(&mut fresh);
                    let rest = queues[c][cursor[c]..].to_vec();
                    queues[c] = rest.into_iter().chain(fresh).collect();
                    cursor[c] = 0;
                }
                batch.extend_from_slice(&queues[c][cursor[c]..cursor[c] + k]);
                cursor[c] += k;
            }
            visits[c] += k;
        }
        out.push(batch);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(counts: &[usize]) -> LabelVector {
        let y: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
            .collect();
        LabelVector::new(y, counts.len()).unwrap()
    }

    fn composition(batch: &[usize], y: &LabelVector, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &i in batch {
            counts[y.as_slice()[i]] += 1;
        }
        counts
    }

    #[test]
    fn two_by_two() {
        let y = labels(&[5, 5]);
        let plan = BatchPlan::new(2, 2).unwrap();
        let batches = balanced_batches(&y, &plan, &mut SeededRng::new(0)).unwrap();
        assert_eq!(batches.len(), 2);
        for b in &batches {
            assert_eq!(composition(b, &y, 2), vec![2, 2]);
        }
    }

    #[test]
    fn default_plan_batch_size() {
        let plan = BatchPlan::new(32, 8).unwrap();
        assert_eq!(plan.batch_size(), 256);
        let y = labels(&[10; 40]);
        let batches = balanced_batches(&y, &plan, &mut SeededRng::new(1)).unwrap();
        for b in &batches {
            assert_eq!(b.len(), 256);
            let comp = composition(b, &y, 40);
            assert_eq!(comp.iter().filter(|&&n| n == 8).count(), 32);
            assert_eq!(comp.iter().filter(|&&n| n == 0).count(), 8);
        }
    }

    #[test]
    fn visit_counts_stay_within_k() {
        let y = labels(&[30, 41, 25, 60, 33, 28, 50]);
        let plan = BatchPlan::new(3, 4).unwrap();
        let batches = balanced_batches(&y, &plan, &mut SeededRng::new(5)).unwrap();
        let mut visits = vec![0usize; 7];
        for b in &batches {
            for (c, n) in composition(b, &y, 7).into_iter().enumerate() {
                visits[c] += n;
            }
        }
        let (lo, hi) = (visits.iter().min().unwrap(), visits.iter().max().unwrap());
        assert!(hi - lo <= 4, "{visits:?}");
    }

    #[test]
    fn no_duplicates_within_an_unrefilled_epoch() {
        let y = labels(&[16, 16, 16, 16]);
        let plan = BatchPlan::new(4, 4).unwrap();
        let batches = balanced_batches(&y, &plan, &mut SeededRng::new(2)).unwrap();
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 64);
    }

    #[test]
    fn deterministic_per_seed() {
        let y = labels(&[20, 20, 20]);
        let plan = BatchPlan::new(2, 3).unwrap();
        let a = balanced_batches(&y, &plan, &mut SeededRng::new(9)).unwrap();
        let b = balanced_batches(&y, &plan, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_class_errors_unless_replacement() {
        let y = labels(&[10, 3]);
        let mut plan = BatchPlan::new(2, 4).unwrap();
        assert!(matches!(
            balanced_batches(&y, &plan, &mut SeededRng::new(0)),
            Err(Error::InsufficientClassSamples {
                class: 1,
                available: 3,
                required: 4
            })
        ));
        plan.with_replacement = true;
        let batches = balanced_batches(&y, &plan, &mut SeededRng::new(0)).unwrap();
        assert_eq!(composition(&batches[0], &y, 2), vec![4, 4]);
    }

    #[test]
    fn rejects_bad_plans() {
        assert!(BatchPlan::new(1, 4).is_err());
        assert!(BatchPlan::new(4, 1).is_err());
        let y = labels(&[10, 10]);
        let plan = BatchPlan::new(3, 2).unwrap();
        assert!(matches!(
            balanced_batches(&y, &plan, &mut SeededRng::new(0)),
            Err(Error::InvalidConfiguration(_))
        ));
    }
}

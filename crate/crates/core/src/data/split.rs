use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::dataset::{Dataset, Split, Target};
use crate::error::{NodeError, Result};
use crate::NodeRng;

fn val_count(n: usize, fraction: f64) -> usize {
    ((n as f64) * fraction).round() as usize
}

/// Generator stream for validation sampling; batch order uses stream
/// `epoch` and training uses the two streams above this one.
const SPLIT_STREAM: u64 = u64::MAX - 2;

/// Moves a `fraction` of the training rows to validation.
///
/// Deterministic in `seed`. With `stratify` set and class-label targets,
/// each class contributes `round(fraction · size)` rows; classes with fewer
/// than two rows are pooled and split without stratification.
pub fn split_train_val(dataset: &Dataset, fraction: f64, seed: u64, stratify: bool) -> Result<Dataset> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(NodeError::InvalidArgument(format!(
            "validation fraction must be in [0, 1), got {fraction}"
        )));
    }
    let train = dataset.indices(Split::Train);
    if train.is_empty() {
        return Err(NodeError::InvalidArgument("no training rows to split".into()));
    }
    let mut rng = NodeRng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    let mut chosen = Vec::new();
    match (&dataset.target, stratify) {
        (Some(Target::Labels(labels)), true) => {
            let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for &i in &train {
                by_class.entry(labels[i].as_str()).or_default().push(i);
            }
            let mut pool = Vec::new();
            for (label, mut rows) in by_class {
                if rows.len() < 2 {
                    log::warn!("class {label:?} has fewer than 2 rows; splitting it without stratification");
                    pool.append(&mut rows);
                    continue;
                }
                rows.shuffle(&mut rng);
                let k = val_count(rows.len(), fraction);
                chosen.extend_from_slice(&rows[..k]);
            }
            pool.shuffle(&mut rng);
            let k = val_count(pool.len(), fraction);
            chosen.extend_from_slice(&pool[..k]);
        }
        (target, strat) => {
            if strat && matches!(target, Some(Target::Values(_))) {
                log::warn!("stratified split requested for real-valued targets; using a plain split");
            }
            let mut rows = train.clone();
            rows.shuffle(&mut rng);
            let k = val_count(rows.len(), fraction);
            chosen.extend_from_slice(&rows[..k]);
        }
    }
    let mut out = dataset.clone();
    for i in chosen {
        out.split[i] = Split::Val;
    }
    Ok(out)
}

/// Shuffled index blocks over `0..rows`, deterministic in `(seed, epoch)`.
/// The final short block is kept.
pub fn batches(rows: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if rows == 0 {
        return Err(NodeError::InvalidArgument("cannot batch an empty partition".into()));
    }
    if batch_size == 0 {
        return Err(NodeError::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = NodeRng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn labelled(rows: usize, labels: impl Fn(usize) -> &'static str) -> Dataset {
        let x = Tensor::new(vec![rows, 1], (0..rows).map(|i| i as f64).collect()).unwrap();
        let t = Target::Labels((0..rows).map(|i| labels(i).to_string()).collect());
        Dataset::from_matrix(&x, None, "y", Some(t)).unwrap()
    }

    #[test]
    fn eighty_twenty() {
        let ds = labelled(100, |_| "a");
        let s = split_train_val(&ds, 0.2, 1, false).unwrap();
        assert_eq!(s.indices(Split::Val).len(), 20);
        assert_eq!(s.indices(Split::Train).len(), 80);
    }

    #[test]
    fn same_seed_same_split() {
        let ds = labelled(100, |i| if i % 3 == 0 { "a" } else { "b" });
        let a = split_train_val(&ds, 0.2, 9, true).unwrap();
        let b = split_train_val(&ds, 0.2, 9, true).unwrap();
        assert_eq!(a.split, b.split);
        let c = split_train_val(&ds, 0.2, 10, true).unwrap();
        assert_ne!(a.split, c.split);
    }

    #[test]
    fn stratified_balances_classes() {
        let ds = labelled(100, |i| if i % 2 == 0 { "a" } else { "b" });
        let s = split_train_val(&ds, 0.2, 3, true).unwrap();
        let val = s.indices(Split::Val);
        assert_eq!(val.len(), 20);
        assert_eq!(val.iter().filter(|&&i| i % 2 == 0).count(), 10);
    }

    #[test]
    fn singleton_class_does_not_fail() {
        let ds = labelled(21, |i| if i == 0 { "rare" } else { "common" });
        let s = split_train_val(&ds, 0.2, 3, true).unwrap();
        assert_eq!(s.indices(Split::Val).len(), 4);
    }

    #[test]
    fn batch_sizes_and_partition() {
        let b = batches(10, 4, 0, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batches_are_deterministic_per_epoch() {
        assert_eq!(batches(50, 7, 3, 2).unwrap(), batches(50, 7, 3, 2).unwrap());
        assert_ne!(batches(50, 7, 3, 2).unwrap(), batches(50, 7, 3, 3).unwrap());
    }

    #[test]
    fn empty_partition_is_an_error() {
        assert!(batches(0, 4, 0, 0).is_err());
    }
}

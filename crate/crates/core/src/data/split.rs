use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassLabel, DataError, Result};

/// Disjoint train/validation index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

fn val_size(n: usize, fraction: f64) -> usize {
    // The nudge keeps products like 0.29 * 100 from flooring to 28.
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Seeded train/validation split. The plain split shuffles all indices and
/// takes the last `floor(fraction * N)` as validation. The stratified split
/// does the same per class, with per-class quotas chosen by largest remainder
/// so they sum to the same total.
pub fn split(labels: &[ClassLabel], val_fraction: f64, seed: u64, stratified: bool) -> Result<SplitPlan> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::Fraction(val_fraction));
    }
    let n = labels.len();
    let n_val = val_size(n, val_fraction);
    if n_val == 0 || n_val == n {
        return Err(DataError::TooFewSamples {
            total: n,
            fraction: val_fraction,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !stratified {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let val = order.split_off(n - n_val);
        return Ok(SplitPlan { train: order, val });
    }

    let mut per_class: Vec<Vec<usize>> = ClassLabel::ALL
        .iter()
        .map(|&c| (0..n).filter(|&i| labels[i] == c).collect())
        .collect();
    let exact: Vec<f64> = per_class.iter().map(|v| v.len() as f64 * val_fraction).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut by_remainder: Vec<usize> = (0..per_class.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = exact[a] - quota[a] as f64;
        let rb = exact[b] - quota[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = n_val - quota.iter().sum::<usize>();
    for &c in by_remainder.iter().cycle() {
        if missing == 0 {
            break;
        }
        if quota[c] < per_class[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut train = Vec::with_capacity(n - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (idx, q) in per_class.iter_mut().zip(&quota) {
        idx.shuffle(&mut rng);
        let tail = idx.split_off(idx.len() - q);
        train.extend_from_slice(idx);
        val.extend(tail);
    }
    train.shuffle(&mut rng);
    Ok(SplitPlan { train, val })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn labels(counts: [usize; 3]) -> Vec<ClassLabel> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(c, &k)| std::iter::repeat_n(ClassLabel::from_id(c).unwrap(), k))
            .collect()
    }

    #[test]
    fn sizes_follow_floor() {
        let l = labels([1989, 4273, 394]);
        for stratified in [false, true] {
            let plan = split(&l, 0.2, 7, stratified).unwrap();
            assert_eq!(plan.val.len(), 1331);
            assert_eq!(plan.train.len(), 6656 - 1331);
            let all: HashSet<_> = plan.train.iter().chain(&plan.val).collect();
            assert_eq!(all.len(), 6656);
        }
    }

    #[test]
    fn stratified_quotas() {
        let l = labels([10, 10, 5]);
        let plan = split(&l, 0.2, 1, true).unwrap();
        let mut per = [0; 3];
        for &i in &plan.val {
            per[l[i].id()] += 1;
        }
        assert_eq!(per, [2, 2, 1]);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let l = labels([30, 30, 30]);
        assert_eq!(split(&l, 0.2, 3, false).unwrap(), split(&l, 0.2, 3, false).unwrap());
        assert_ne!(split(&l, 0.2, 3, false).unwrap(), split(&l, 0.2, 4, false).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let l = labels([2, 1, 1]);
        assert!(matches!(split(&l, 0.0, 0, false), Err(DataError::Fraction(_))));
        assert!(matches!(split(&l, 1.0, 0, false), Err(DataError::Fraction(_))));
        assert!(matches!(split(&l, 0.2, 0, false), Err(DataError::TooFewSamples { .. })));
        assert!(split(&labels([3, 1, 1]), 0.2, 0, false).is_ok());
    }
}

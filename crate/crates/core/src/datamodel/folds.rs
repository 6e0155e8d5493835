use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, PatientRecord};

/// Assigns each patient to one of `k` folds; fold sizes differ by at most one.
///
/// The returned vector is parallel to `records`.
pub fn split_folds(
    records: &[PatientRecord],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, DataError> {
    if k < 2 {
        return Err(DataError::Schema(format!("need at least 2 folds, got {k}")));
    }
    if records.len() < k {
        return Err(DataError::TooFewPatients {
            needed: k,
            have: records.len(),
        });
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; records.len()];
    for (rank, &i) in order.iter().enumerate() {
        folds[i] = rank % k;
    }
    Ok(folds)
}

/// Indices of the records assigned to `fold`.
pub fn fold_members(folds: &[usize], fold: usize) -> Vec<usize> {
    folds
        .iter()
        .enumerate()
        .filter_map(|(i, &f)| (f == fold).then_some(i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(n: usize) -> Vec<PatientRecord> {
        (0..n)
            .map(|i| PatientRecord {
                id: format!("p{i}"),
                context: vec![],
                context_mask: vec![],
                visits: vec![],
                tte: vec![],
            })
            .collect()
    }

    fn sizes(folds: &[usize], k: usize) -> Vec<usize> {
        let mut s: Vec<usize> = (0..k).map(|f| fold_members(folds, f).len()).collect();
        s.sort_unstable_by(|a, b| b.cmp(a));
        s
    }

    #[test]
    fn ten_patients_five_folds_of_two() {
        let f = split_folds(&records(10), 5, 7).unwrap();
        assert_eq!(sizes(&f, 5), vec![2; 5]);
    }

    #[test]
    fn eleven_patients_uneven() {
        let f = split_folds(&records(11), 5, 7).unwrap();
        assert_eq!(sizes(&f, 5), vec![3, 2, 2, 2, 2]);
    }

    #[test]
    fn deterministic_for_seed() {
        let r = records(37);
        assert_eq!(
            split_folds(&r, 5, 11).unwrap(),
            split_folds(&r, 5, 11).unwrap()
        );
        assert_ne!(
            split_folds(&r, 5, 11).unwrap(),
            split_folds(&r, 5, 12).unwrap()
        );
    }

    #[test]
    fn too_few_patients() {
        assert!(matches!(
            split_folds(&records(3), 5, 0),
            Err(DataError::TooFewPatients { needed: 5, have: 3 })
        ));
    }

    #[test]
    fn partition_is_exact() {
        let f = split_folds(&records(23), 4, 3).unwrap();
        let mut all: Vec<usize> = (0..4).flat_map(|k| fold_members(&f, k)).collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }
}

use super::{PatientRecord, Visit};

/// One causal prediction step: baseline, current visit, future visit, all
/// from the same patient.
#[derive(Debug, Clone, Copy)]
pub struct Triplet<'a> {
    pub record: &'a PatientRecord,
    pub current: usize,
    pub future: usize,
}

impl<'a> Triplet<'a> {
    pub fn baseline(&self) -> &'a Visit {
        &self.record.visits[0]
    }

    pub fn context(&self) -> (&'a [f64], &'a [bool]) {
        (&self.record.context, &self.record.context_mask)
    }

    pub fn current_visit(&self) -> &'a Visit {
        &self.record.visits[self.current]
    }

    pub fn future_visit(&self) -> &'a Visit {
        &self.record.visits[self.future]
    }

    pub fn t_cur(&self) -> f64 {
        self.current_visit().t
    }

    pub fn t_fut(&self) -> f64 {
        self.future_visit().t
    }
}

/// Every ordered visit pair `(i, j)` with `i < j`, baseline included.
pub fn build_triplets(record: &PatientRecord) -> Vec<Triplet<'_>> {
    let v = record.visits.len();
    let mut out = Vec::with_capacity(v * v.saturating_sub(1) / 2);
    for i in 0..v {
        for j in (i + 1)..v {
            out.push(Triplet {
                record,
                current: i,
                future: j,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(times: &[f64]) -> PatientRecord {
        PatientRecord {
            id: "p".into(),
            context: vec![],
            context_mask: vec![],
            visits: times
                .iter()
                .map(|&t| Visit::fully_observed(t, vec![t]))
                .collect(),
            tte: vec![],
        }
    }

    #[test]
    fn three_visits_give_three_triplets() {
        let r = record(&[0.0, 1.0, 3.0]);
        let pairs: Vec<(f64, f64)> = build_triplets(&r)
            .iter()
            .map(|t| (t.t_cur(), t.t_fut()))
            .collect();
        assert_eq!(pairs, vec![(0.0, 1.0), (0.0, 3.0), (1.0, 3.0)]);
    }

    #[test]
    fn baseline_only_gives_none() {
        assert!(build_triplets(&record(&[0.0])).is_empty());
    }

    #[test]
    fn five_visits_give_ten() {
        assert_eq!(
            build_triplets(&record(&[0.0, 1.0, 2.0, 4.0, 8.0])).len(),
            10
        );
    }

    proptest! {
        #[test]
        fn count_is_visits_choose_two(gaps in proptest::collection::vec(0.01f64..5.0, 0..12)) {
            let mut times = vec![0.0];
            for g in gaps {
                let last = *times.last().unwrap();
                times.push(last + g);
            }
            let r = record(&times);
            let ts = build_triplets(&r);
            let v = times.len();
            prop_assert_eq!(ts.len(), v * (v - 1) / 2);
            for t in &ts {
                prop_assert!(0.0 <= t.t_cur() && t.t_cur() < t.t_fut());
                prop_assert_eq!(t.baseline().t, 0.0);
                prop_assert!(std::ptr::eq(t.record, &r));
            }
        }
    }
}

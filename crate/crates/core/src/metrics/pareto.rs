//! Non-dominated subset under (accuracy ↑, size ↓, latency ↓).

use super::records::TradeoffRecord;

pub trait Objectives {
    /// `(accuracy, size, latency)`.
    fn objectives(&self) -> (f64, f64, f64);
}

impl Objectives for TradeoffRecord {
    fn objectives(&self) -> (f64, f64, f64) {
        (
            self.accuracy_pct,
            self.size_bytes as f64,
            self.latency.mean_ms,
        )
    }
}

impl Objectives for (f64, f64, f64) {
    fn objectives(&self) -> (f64, f64, f64) {
        *self
    }
}

/// At least as good on every axis and strictly better on one.
pub fn dominates(a: (f64, f64, f64), b: (f64, f64, f64)) -> bool {
    a.0 >= b.0 && a.1 <= b.1 && a.2 <= b.2 && (a.0 > b.0 || a.1 < b.1 || a.2 < b.2)
}

/// Indices of the non-dominated records, ascending.
///
/// Candidates are visited best-first (accuracy descending, then size and
/// latency ascending); no later candidate can dominate an earlier one, so
/// each only needs checking against the frontier found so far.
pub fn pareto_indices<T: Objectives>(records: &[T]) -> Vec<usize> {
    let obj: Vec<_> = records.iter().map(Objectives::objectives).collect();
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (obj[i], obj[j]);
        b.0.total_cmp(&a.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
    });
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        if !front.iter().any(|&f| dominates(obj[f], obj[i])) {
            front.push(i);
        }
    }
    front.sort_unstable();
    front
}

/// The frontier, in input order.
pub fn pareto_frontier<T: Objectives + Clone>(records: &[T]) -> Vec<T> {
    pareto_indices(records)
        .into_iter()
        .map(|i| records[i].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_and_dominated() {
        assert_eq!(pareto_indices(&[(1.0, 1.0, 1.0)]), vec![0]);
        let r = [(90.0, 10.0, 1.0), (80.0, 20.0, 2.0), (70.0, 5.0, 3.0)];
        assert_eq!(pareto_indices(&r), vec![0, 2]);
    }

    #[test]
    fn duplicates_both_kept() {
        let r = [(1.0, 1.0, 1.0), (1.0, 1.0, 1.0)];
        assert_eq!(pareto_frontier(&r).len(), 2);
    }
}

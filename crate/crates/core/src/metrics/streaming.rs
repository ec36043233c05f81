//! Streaming metrics over the sequence of emitted label prefixes
//! `ŷ_1, …, ŷ_n` where `ŷ_t` has length `t`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edit<T> {
    pub position: usize,
    /// `None` when the position is written for the first time.
    pub old: Option<T>,
    pub new: T,
}

/// Edits made at each timestep: every changed earlier position plus the
/// newly appended one.
pub fn edit_log<T: Clone + PartialEq, S: AsRef<[T]>>(steps: &[S]) -> Vec<Vec<Edit<T>>> {
    let mut out = Vec::with_capacity(steps.len());
    for (k, step) in steps.iter().enumerate() {
        let cur = step.as_ref();
        let mut edits = Vec::new();
        if k > 0 {
            let prev = steps[k - 1].as_ref();
            for (i, (a, b)) in prev.iter().zip(cur).enumerate() {
                if a != b {
                    edits.push(Edit {
                        position: i,
                        old: Some(a.clone()),
                        new: b.clone(),
                    });
                }
            }
        }
        if let Some(last) = cur.last() {
            edits.push(Edit {
                position: cur.len() - 1,
                old: None,
                new: last.clone(),
            });
        }
        out.push(edits);
    }
    out
}

/// `(total, unnecessary)` edits; an edit is unnecessary when the label it
/// writes differs from that position's final label.
pub fn edit_counts<T: Clone + PartialEq, S: AsRef<[T]>>(steps: &[S]) -> (usize, usize) {
    let Some(last) = steps.last() else { return (0, 0) };
    let fin = last.as_ref();
    let mut total = 0;
    let mut wasted = 0;
    for edits in edit_log(steps) {
        for e in edits {
            total += 1;
            if fin.get(e.position) != Some(&e.new) {
                wasted += 1;
            }
        }
    }
    (total, wasted)
}

pub fn edit_overhead<T: Clone + PartialEq, S: AsRef<[T]>>(steps: &[S]) -> f64 {
    let (total, wasted) = edit_counts(steps);
    if total == 0 {
        0.0
    } else {
        wasted as f64 / total as f64
    }
}

fn prefix_match_rate<T: PartialEq, S: AsRef<[T]>>(steps: &[S], reference: &[T]) -> f64 {
    if steps.is_empty() {
        return 0.0;
    }
    let hits = steps
        .iter()
        .filter(|s| {
            let s = s.as_ref();
            s.len() <= reference.len() && s == &reference[..s.len()]
        })
        .count();
    hits as f64 / steps.len() as f64
}

/// Fraction of timesteps whose emitted sequence is a prefix of the final one.
pub fn relative_correctness<T: PartialEq, S: AsRef<[T]>>(steps: &[S]) -> f64 {
    match steps.last() {
        Some(fin) => prefix_match_rate(steps, fin.as_ref()),
        None => 0.0,
    }
}

/// Fraction of timesteps whose emitted sequence equals the gold prefix.
pub fn streaming_em<T: PartialEq, S: AsRef<[T]>>(steps: &[S], gold: &[T]) -> Result<f64> {
    if gold.len() != steps.len() {
        return Err(Error::Input(format!(
            "{} gold labels for {} timesteps",
            gold.len(),
            steps.len()
        )));
    }
    Ok(prefix_match_rate(steps, gold))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    fn worked_example() -> Vec<Vec<&'static str>> {
        ["O", "O O", "O LOC LOC", "O ORG ORG ORG", "O ORG ORG ORG LOC"]
            .iter()
            .map(|s| seq(s))
            .collect()
    }

    #[test]
    fn worked_example_running_counts() {
        let steps = worked_example();
        let fin = steps.last().unwrap().clone();
        let mut total = 0;
        let mut wasted = 0;
        let mut running = Vec::new();
        for edits in edit_log(&steps) {
            for e in edits {
                total += 1;
                wasted += (fin[e.position] != e.new) as usize;
            }
            running.push((total, wasted));
        }
        assert_eq!(running, vec![(1, 0), (2, 1), (4, 3), (7, 3), (8, 3)]);
        assert_eq!(edit_overhead(&steps), 3.0 / 8.0);
        assert_eq!(relative_correctness(&steps), 3.0 / 5.0);
        assert_eq!(streaming_em(&steps, &seq("O LOC LOC LOC LOC")).unwrap(), 2.0 / 5.0);
    }

    #[test]
    fn never_revised_streams() {
        let steps: Vec<Vec<u8>> = (1..=6).map(|t| (0..t as u8).collect()).collect();
        assert_eq!(edit_overhead(&steps), 0.0);
        assert_eq!(relative_correctness(&steps), 1.0);
        assert_eq!(relative_correctness(&[vec![3]]), 1.0);
        assert_eq!(edit_overhead(&[vec![3]]), 0.0);
    }

    #[test]
    fn set_changed_and_restored_counts_only_the_detour() {
        // Position 0 goes A → B → A: the B write is the only wasted edit.
        let steps = vec![seq("A"), seq("B X"), seq("A X Y")];
        assert_eq!(edit_counts(&steps), (5, 1));
    }

    #[test]
    fn gold_length_mismatch_is_an_error() {
        assert!(streaming_em(&[seq("A")], &seq("A B")).is_err());
    }

    proptest::proptest! {
        #[test]
        fn streaming_em_counts_exact_prefixes(
            gold in proptest::collection::vec(0u8..3, 1..12),
            noise in proptest::collection::vec(0u8..6, 78),
        ) {
            // Step t emits t labels; a draw below 3 replaces the gold label.
            let mut k = 0;
            let steps: Vec<Vec<u8>> = (1..=gold.len())
                .map(|t| {
                    gold[..t]
                        .iter()
                        .map(|&g| {
                            k += 1;
                            if noise[k - 1] < 3 { noise[k - 1] } else { g }
                        })
                        .collect()
                })
                .collect();
            let exact = steps.iter().enumerate().filter(|(i, s)| s.as_slice() == &gold[..=*i]).count();
            proptest::prop_assert_eq!(streaming_em(&steps, &gold).unwrap(), exact as f64 / gold.len() as f64);
        }
    }
}

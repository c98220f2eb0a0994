use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.reference_len as f64
    }
}

/// Levenshtein alignment of `hyp` against `reference`. Among minimum-cost
/// alignments the one with the most substitutions is reported.
pub fn word_error_rate<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<ErrorCounts> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("word error rate needs a non-empty reference".into()));
    }
    let (n, m) = (reference.len(), hyp.len());
    // (cost, substitutions, deletions, insertions)
    type Cell = (usize, usize, usize, usize);
    let mut d: Vec<Vec<Cell>> = vec![vec![(0, 0, 0, 0); m + 1]; n + 1];
    for i in 1..=n {
        d[i][0] = (i, 0, i, 0);
    }
    for j in 1..=m {
        d[0][j] = (j, 0, 0, j);
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[i - 1][j - 1];
            let sub = if reference[i - 1] == hyp[j - 1] { diag } else { (diag.0 + 1, diag.1 + 1, diag.2, diag.3) };
            let up = d[i - 1][j];
            let del = (up.0 + 1, up.1, up.2 + 1, up.3);
            let left = d[i][j - 1];
            let ins = (left.0 + 1, left.1, left.2, left.3 + 1);
            d[i][j] = [sub, del, ins].into_iter().min_by_key(|c| (c.0, std::cmp::Reverse(c.1))).unwrap();
        }
    }
    let (_, s, del, ins) = d[n][m];
    Ok(ErrorCounts { substitutions: s, deletions: del, insertions: ins, reference_len: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::edit_distance_enumerate;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let r = word_error_rate(&["a", "b", "c"], &["a", "b", "c"]).unwrap();
        assert_eq!(r.wer(), 0.0);
        let r = word_error_rate(&["a", "x", "c"], &["a", "b", "c"]).unwrap();
        assert_eq!((r.substitutions, r.deletions, r.insertions), (1, 0, 0));
        assert!((r.wer() - 1.0 / 3.0).abs() < 1e-15);
        let r = word_error_rate::<u8>(&[], &[1, 2]).unwrap();
        assert_eq!((r.deletions, r.wer()), (2, 1.0));
        let r = word_error_rate(&[1, 2, 3], &[2]).unwrap();
        assert_eq!((r.insertions, r.errors()), (2, 2));
        assert!(word_error_rate(&[1], &[]).is_err());
    }

    fn dp_distance(a: &[usize], b: &[usize]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for i in 1..=a.len() {
            let mut cur = vec![i; b.len() + 1];
            for j in 1..=b.len() {
                cur[j] = (prev[j - 1] + usize::from(a[i - 1] != b[j - 1])).min(prev[j] + 1).min(cur[j - 1] + 1);
            }
            prev = cur;
        }
        prev[b.len()]
    }

    proptest! {
        #[test]
        fn matches_oracles(hyp in prop::collection::vec(0usize..3, 0..=6), reference in prop::collection::vec(0usize..3, 1..=6)) {
            let r = word_error_rate(&hyp, &reference).unwrap();
            prop_assert_eq!(r.errors(), dp_distance(&hyp, &reference));
            prop_assert_eq!(r.errors(), edit_distance_enumerate(&hyp, &reference));
            // Counts must describe a valid edit script.
            prop_assert_eq!(reference.len() - r.deletions + r.insertions, hyp.len());
        }
    }
}

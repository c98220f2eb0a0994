use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Outcome of decoding one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UttResult {
    pub id: String,
    /// Raw input frames.
    pub frames: usize,
    pub errors: usize,
    pub reference_len: usize,
    pub hypothesis: Vec<usize>,
    pub reference: Vec<usize>,
}

impl UttResult {
    pub const HEADER: &'static str = "id\tframes\terrors\treference_len\thypothesis\treference";

    fn join(tokens: &[usize]) -> String {
        tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    }

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.id,
            self.frames,
            self.errors,
            self.reference_len,
            Self::join(&self.hypothesis),
            Self::join(&self.reference)
        )
    }

    pub fn parse_line(line: &str, lineno: usize) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(Error::Parse { line: lineno, reason: format!("expected 6 fields, found {}", f.len()) });
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse { line: lineno, reason: format!("invalid number '{s}'") });
        let toks = |s: &str| s.split_whitespace().map(num).collect::<Result<Vec<_>>>();
        Ok(UttResult {
            id: f[0].to_string(),
            frames: num(f[1])?,
            errors: num(f[2])?,
            reference_len: num(f[3])?,
            hypothesis: toks(f[4])?,
            reference: toks(f[5])?,
        })
    }
}

pub fn write_results(results: &[UttResult]) -> String {
    let mut s = String::from(UttResult::HEADER);
    s.push('\n');
    for r in results {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

pub fn parse_results(text: &str) -> Result<Vec<UttResult>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == UttResult::HEADER => {}
        _ => return Err(Error::Parse { line: 1, reason: "missing results header".into() }),
    }
    lines.filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| UttResult::parse_line(l, i + 1)).collect()
}

/// Aggregate over utterances whose frame count lies in `[lo, hi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bucket {
    pub lo: Option<usize>,
    pub hi: Option<usize>,
    pub utterances: usize,
    pub errors: usize,
    pub reference_tokens: usize,
}

impl Bucket {
    pub fn wer(&self) -> f64 {
        self.errors as f64 / self.reference_tokens as f64
    }
}

/// Splits results at the strictly increasing `edges` into `edges.len() + 1`
/// frame-count buckets; buckets without utterances are omitted.
pub fn bucketed_report(results: &[UttResult], edges: &[usize]) -> Result<Vec<Bucket>> {
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("bucket edges {edges:?} are not strictly increasing")));
    }
    let mut buckets: Vec<Bucket> = (0..=edges.len())
        .map(|i| Bucket {
            lo: i.checked_sub(1).map(|k| edges[k]),
            hi: edges.get(i).copied(),
            utterances: 0,
            errors: 0,
            reference_tokens: 0,
        })
        .collect();
    for r in results {
        let b = &mut buckets[edges.partition_point(|&e| e <= r.frames)];
        b.utterances += 1;
        b.errors += r.errors;
        b.reference_tokens += r.reference_len;
    }
    Ok(buckets.into_iter().filter(|b| b.utterances > 0).collect())
}

/// Interior decile cut points of `frames`, deduplicated.
pub fn decile_edges(frames: &[usize]) -> Vec<usize> {
    if frames.is_empty() {
        return Vec::new();
    }
    let mut sorted = frames.to_vec();
    sorted.sort_unstable();
    let mut edges: Vec<usize> = (1..10).map(|k| sorted[k * sorted.len() / 10]).collect();
    edges.dedup();
    if edges.first() == Some(&sorted[0]) {
        edges.remove(0);
    }
    edges
}

pub fn format_report(buckets: &[Bucket]) -> String {
    let mut s = String::from("frames\tutterances\terrors\treference_tokens\twer\n");
    for b in buckets {
        let range = match (b.lo, b.hi) {
            (None, None) => "all".to_string(),
            (None, Some(h)) => format!("<{h}"),
            (Some(l), None) => format!(">={l}"),
            (Some(l), Some(h)) => format!("{l}-{}", h - 1),
        };
        writeln!(s, "{range}\t{}\t{}\t{}\t{:.4}", b.utterances, b.errors, b.reference_tokens, b.wer()).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(frames: usize, errors: usize, len: usize) -> UttResult {
        UttResult { id: format!("u{frames}"), frames, errors, reference_len: len, hypothesis: vec![1], reference: vec![2; len] }
    }

    #[test]
    fn single_bucket_is_corpus_wer() {
        let res = vec![r(5, 1, 4), r(20, 0, 3), r(9, 2, 2)];
        let b = bucketed_report(&res, &[]).unwrap();
        assert_eq!(b.len(), 1);
        assert!((b[0].wer() - 3.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn constructed_buckets_reproduced_and_empty_absent() {
        let res = vec![r(3, 1, 2), r(4, 1, 2), r(12, 3, 4), r(25, 0, 5)];
        let b = bucketed_report(&res, &[5, 10, 20]).unwrap();
        let got: Vec<_> = b.iter().map(|b| (b.lo, b.hi, b.utterances, b.wer())).collect();
        assert_eq!(got, vec![(None, Some(5), 2, 0.5), (Some(10), Some(20), 1, 0.75), (Some(20), None, 1, 0.0)]);
        assert!(bucketed_report(&res, &[5, 5]).is_err());
        let text = format_report(&b);
        assert!(text.contains("10-19\t1\t3\t4\t0.7500"));
    }

    #[test]
    fn edges_go_to_upper_bucket() {
        let b = bucketed_report(&[r(10, 1, 1)], &[10]).unwrap();
        assert_eq!(b[0].lo, Some(10));
    }

    #[test]
    fn deciles() {
        let frames: Vec<usize> = (1..=100).collect();
        assert_eq!(decile_edges(&frames), vec![11, 21, 31, 41, 51, 61, 71, 81, 91]);
        assert!(decile_edges(&[7, 7, 7]).is_empty());
    }

    #[test]
    fn results_round_trip() {
        let res = vec![r(3, 1, 2), UttResult { hypothesis: vec![], ..r(9, 2, 2) }];
        let text = write_results(&res);
        assert_eq!(parse_results(&text).unwrap(), res);
        assert!(parse_results("bad\n").is_err());
        assert!(parse_results(&format!("{}\nx\t1\n", UttResult::HEADER)).is_err());
    }
}

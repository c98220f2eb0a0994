//! Brute-force reference computations.
//!
//! Each function here enumerates the quantity it computes directly from its
//! definition and shares no code with the dynamic-programming implementations
//! elsewhere in the crate. They are exponential in the input size and meant for
//! tiny instances only.

/// Expected alignments by enumerating every monotonic sequence of selection
/// decisions. Token `i` scans frames from the previous token's boundary
/// (frame 0 for the first token), selecting frame `j` with probability
/// `p[i][j]`. Returns `alpha[i][j]` = probability that token `i` selects `j`.
pub fn expected_alignment_paths(p: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let u = p.len();
    let t = p.first().map_or(0, Vec::len);
    let mut alpha = vec![vec![0.0; t]; u];

    fn walk(i: usize, start: usize, prob: f64, p: &[Vec<f64>], alpha: &mut [Vec<f64>]) {
        if i == p.len() {
            return;
        }
        let t = p[i].len();
        for j in start..t {
            let mut path = prob;
            for l in start..j {
                path *= 1.0 - p[i][l];
            }
            path *= p[i][j];
            alpha[i][j] += path;
            walk(i + 1, j, path, p, alpha);
        }
    }

    walk(0, 0, 1.0, p, &mut alpha);
    alpha
}

/// Chunkwise attention weights computed straight from the double sum, without
/// any stabilization. Windows are truncated at the sequence edges.
pub fn chunkwise_attention_loops(alpha: &[f64], u: &[f64], w: usize) -> Vec<f64> {
    let t = alpha.len();
    let mut beta = vec![0.0; t];
    for (j, b) in beta.iter_mut().enumerate() {
        for k in j..(j + w).min(t) {
            let lo = (k + 1).saturating_sub(w);
            let denom: f64 = (lo..=k).map(|l| u[l].exp()).sum();
            *b += alpha[k] * u[j].exp() / denom;
        }
    }
    beta
}

/// Collapses a CTC path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Visits every path in `[0, v)^t`.
fn for_each_path(t: usize, v: usize, mut f: impl FnMut(&[usize])) {
    let mut path = vec![0usize; t];
    loop {
        f(&path);
        let mut pos = 0;
        loop {
            if pos == t {
                return;
            }
            path[pos] += 1;
            if path[pos] < v {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Total probability of all paths collapsing to `labels`, from per-frame
/// probabilities `probs[t][v]`.
pub fn ctc_total_prob(probs: &[Vec<f64>], labels: &[usize], blank: usize) -> f64 {
    let v = probs.first().map_or(0, Vec::len);
    let mut total = 0.0;
    for_each_path(probs.len(), v, |path| {
        if collapse(path, blank) == labels {
            total += path.iter().enumerate().map(|(t, &s)| probs[t][s]).product::<f64>();
        }
    });
    total
}

/// Most probable path collapsing to `labels` and its probability.
pub fn ctc_best_path(probs: &[Vec<f64>], labels: &[usize], blank: usize) -> Option<(Vec<usize>, f64)> {
    let v = probs.first().map_or(0, Vec::len);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for_each_path(probs.len(), v, |path| {
        if collapse(path, blank) == labels {
            let pr: f64 = path.iter().enumerate().map(|(t, &s)| probs[t][s]).product();
            if best.as_ref().is_none_or(|(_, b)| pr > *b) {
                best = Some((path.to_vec(), pr));
            }
        }
    });
    best
}

/// Levenshtein distance by enumerating edit scripts: the minimum over all
/// ways of consuming both sequences with match/substitute, delete, insert.
pub fn edit_distance_enumerate(hyp: &[usize], reference: &[usize]) -> usize {
    fn go(h: &[usize], r: &[usize]) -> usize {
        match (h.split_first(), r.split_first()) {
            (None, None) => 0,
            (Some(_), None) => h.len(),
            (None, Some(_)) => r.len(),
            (Some((hx, ht)), Some((rx, rt))) => {
                let sub = go(ht, rt) + usize::from(hx != rx);
                let ins = go(ht, r) + 1;
                let del = go(h, rt) + 1;
                sub.min(ins).min(del)
            }
        }
    }
    go(hyp, reference)
}

use std::fmt::Write as _;

use crate::ctc;
use crate::error::{Error, Result};
use crate::model::{EncoderMode, MochaModel, Utterance};

/// One output position: a label or the trailing end-of-sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    /// `None` for end-of-sentence.
    pub token: Option<usize>,
    /// Teacher-forced expected boundary rounded into `[1, T]`.
    pub mocha_boundary: usize,
    /// Closest greedy CTC spike of the same token; end-of-sentence maps to `T`.
    pub ctc_spike: Option<usize>,
}

impl TraceRecord {
    pub fn gap(&self) -> Option<usize> {
        self.ctc_spike.map(|s| s.abs_diff(self.mocha_boundary))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentTrace {
    pub utterance: String,
    /// Encoder frames `T`.
    pub frames: usize,
    /// Raw input frames per encoder frame.
    pub stride: usize,
    pub records: Vec<TraceRecord>,
}

impl AlignmentTrace {
    pub const HEADER: &'static str = "utterance\tframes\tstride\ttoken\tmocha_boundary_frame\tnearest_ctc_spike_frame\tgap";

    /// Mean gap over records that found a spike.
    pub fn mean_gap(&self) -> Option<f64> {
        let gaps: Vec<usize> = self.records.iter().filter_map(TraceRecord::gap).collect();
        (!gaps.is_empty()).then(|| gaps.iter().sum::<usize>() as f64 / gaps.len() as f64)
    }
}

/// Teacher-forced MoChA boundaries against greedy CTC spikes for one utterance.
pub fn export_alignment_trace(model: &MochaModel, utt: &Utterance, mode: EncoderMode) -> Result<AlignmentTrace> {
    let a = model.analyze(utt, mode)?;
    let frames = a.ctc_log_probs.rows();
    let spikes = ctc::ctc_greedy_spikes(&a.ctc_log_probs);
    let mut records = Vec::with_capacity(a.b_mocha.len());
    for (i, &b) in a.b_mocha.iter().enumerate() {
        let boundary = (b.round().max(1.0) as usize).min(frames);
        let token = utt.labels.get(i).copied();
        let ctc_spike = match token {
            None => Some(frames),
            Some(y) => spikes
                .iter()
                .filter(|(_, c)| *c == y)
                .map(|(f, _)| *f)
                .min_by_key(|f| (f.abs_diff(boundary), *f)),
        };
        records.push(TraceRecord { token, mocha_boundary: boundary, ctc_spike });
    }
    Ok(AlignmentTrace { utterance: utt.id.clone(), frames, stride: model.config.subsample, records })
}

pub fn write_traces(traces: &[AlignmentTrace]) -> String {
    let mut s = String::from(AlignmentTrace::HEADER);
    s.push('\n');
    let na = |x: Option<usize>| x.map_or_else(|| "NA".to_string(), |v| v.to_string());
    for t in traces {
        for r in &t.records {
            let token = r.token.map_or_else(|| "eos".to_string(), |y| y.to_string());
            writeln!(s, "{}\t{}\t{}\t{token}\t{}\t{}\t{}", t.utterance, t.frames, t.stride, r.mocha_boundary, na(r.ctc_spike), na(r.gap())).unwrap();
        }
    }
    s
}

/// Parses a trace file; consecutive lines with the same utterance form one trace.
pub fn parse_traces(text: &str) -> Result<Vec<AlignmentTrace>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == AlignmentTrace::HEADER => {}
        _ => return Err(Error::Parse { line: 1, reason: "missing trace header".into() }),
    }
    let mut traces: Vec<AlignmentTrace> = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let err = |reason: String| Error::Parse { line: lineno, reason };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| err(format!("invalid number '{s}'")));
        let opt = |s: &str| if s == "NA" { Ok(None) } else { num(s).map(Some) };
        let frames = num(f[1])?;
        let stride = num(f[2])?;
        let token = if f[3] == "eos" { None } else { Some(num(f[3])?) };
        let mocha_boundary = num(f[4])?;
        let ctc_spike = opt(f[5])?;
        let record = TraceRecord { token, mocha_boundary, ctc_spike };
        if opt(f[6])? != record.gap() {
            return Err(err("gap column disagrees with the frames".into()));
        }
        for idx in [Some(mocha_boundary), ctc_spike].into_iter().flatten() {
            if !(1..=frames).contains(&idx) {
                return Err(err(format!("frame {idx} outside [1, {frames}]")));
            }
        }
        match traces.last_mut() {
            Some(t) if t.utterance == f[0] && t.frames == frames && t.stride == stride => t.records.push(record),
            _ => traces.push(AlignmentTrace { utterance: f[0].to_string(), frames, stride, records: vec![record] }),
        }
    }
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pipeline::{generate_toy_batch, ToyTaskSpec};

    #[test]
    fn untrained_model_trace_is_well_formed_and_round_trips() {
        let cfg = ModelConfig { vocab: 4, feat_dim: 3, enc_hidden: 6, dec_hidden: 6, emb_dim: 3, attn_dim: 4, ..ModelConfig::default() };
        let m = MochaModel::new(cfg, 3).unwrap();
        let utts = generate_toy_batch(&ToyTaskSpec { vocab: 4, feat_dim: 3, min_tokens: 1, ..Default::default() }, 20, 4).unwrap();
        let traces: Vec<_> = utts.iter().map(|u| export_alignment_trace(&m, u, EncoderMode::OFFLINE).unwrap()).collect();
        for (t, u) in traces.iter().zip(&utts) {
            assert_eq!(t.records.len(), u.labels.len() + 1);
            assert_eq!(t.records.last().unwrap().token, None);
            for r in &t.records {
                assert!((1..=t.frames).contains(&r.mocha_boundary));
            }
        }
        let single = utts.iter().position(|u| u.labels.len() == 1).expect("a single-token utterance");
        assert_eq!(traces[single].records.len(), 2);
        let text = write_traces(&traces);
        let parsed = parse_traces(&text).unwrap();
        assert_eq!(parsed, traces);
        assert_eq!(write_traces(&parsed), text);
    }

    #[test]
    fn rejects_out_of_range_and_inconsistent_rows() {
        let h = AlignmentTrace::HEADER;
        assert!(parse_traces(&format!("{h}\nu\t5\t2\t1\t6\t5\t1\n")).is_err());
        assert!(parse_traces(&format!("{h}\nu\t5\t2\t1\t3\t5\t1\n")).is_err());
        assert!(parse_traces(&format!("{h}\nu\t5\t2\t1\t3\tNA\tNA\n")).is_ok());
        assert!(parse_traces("nope\n").is_err());
    }
}

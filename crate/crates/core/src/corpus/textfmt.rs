//! Line-oriented text formats, one utterance per line.
//!
//! * unit files: `<id> <label> ...` or time-stamped `<id> <label>:<start>:<end> ...`
//! * segmentation files: `<id> <word> ...` where a word is dash-joined labels, or
//!   dash-joined `<label>:<start>:<end>` unit tokens in the time-stamped variant
//! * frame label files: `<id> l_1 ... l_N`, one label per frame
//!
//! Times are written with three decimals. Plain (untimed) inputs get symbolic
//! times where token `i` spans `[i, i + 1)`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, UwsError};
use crate::seq::{check_label, Segmentation, UnitSequence, UnitToken, Word};

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| UwsError::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_owned()))
        .collect())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| UwsError::io(path, e))
}

fn fmt_time(t: f64) -> String {
    format!("{t:.3}")
}

fn parse_timed(tok: &str, ctx: &str) -> Result<UnitToken> {
    let mut parts = tok.split(':');
    let (Some(label), Some(s), Some(e), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(UwsError::parse(
            ctx,
            format!("bad time-stamped token {tok:?}"),
        ));
    };
    check_label(label).map_err(|e| UwsError::parse(ctx, e.to_string()))?;
    let start: f64 = s
        .parse()
        .map_err(|_| UwsError::parse(ctx, format!("bad start time in {tok:?}")))?;
    let end: f64 = e
        .parse()
        .map_err(|_| UwsError::parse(ctx, format!("bad end time in {tok:?}")))?;
    Ok(UnitToken::new(label, start, end))
}

fn format_token(t: &UnitToken, timestamped: bool) -> String {
    if timestamped {
        format!("{}:{}:{}", t.label, fmt_time(t.start), fmt_time(t.end))
    } else {
        t.label.clone()
    }
}

pub fn format_unit_line(seq: &UnitSequence, timestamped: bool) -> String {
    let mut line = seq.utterance_id.clone();
    for t in &seq.tokens {
        line.push(' ');
        line.push_str(&format_token(t, timestamped));
    }
    line
}

pub fn parse_unit_line(line: &str, ctx: &str) -> Result<UnitSequence> {
    let mut fields = line.split_whitespace();
    let id = fields
        .next()
        .ok_or_else(|| UwsError::parse(ctx, "missing utterance id"))?;
    let mut tokens = Vec::new();
    for (i, f) in fields.enumerate() {
        if f.contains(':') {
            tokens.push(parse_timed(f, ctx)?);
        } else {
            check_label(f).map_err(|e| UwsError::parse(ctx, e.to_string()))?;
            tokens.push(UnitToken::new(f, i as f64, (i + 1) as f64));
        }
    }
    let seq = UnitSequence::new(id, tokens);
    seq.validate()
        .map_err(|e| UwsError::parse(ctx, e.to_string()))?;
    Ok(seq)
}

pub fn write_unit_file(
    seqs: &[UnitSequence],
    path: impl AsRef<Path>,
    timestamped: bool,
) -> Result<()> {
    let mut out = String::new();
    for s in seqs {
        let _ = writeln!(out, "{}", format_unit_line(s, timestamped));
    }
    write_text(path.as_ref(), &out)
}

pub fn read_unit_file(path: impl AsRef<Path>) -> Result<Vec<UnitSequence>> {
    let path = path.as_ref();
    read_lines(path)?
        .into_iter()
        .map(|(n, l)| parse_unit_line(&l, &format!("{}:{n}", path.display())))
        .collect()
}

pub fn format_segmentation_line(seg: &Segmentation, timestamped: bool) -> String {
    let mut line = seg.utterance_id.clone();
    for w in &seg.words {
        line.push(' ');
        let parts: Vec<String> = w
            .units
            .iter()
            .map(|u| format_token(u, timestamped))
            .collect();
        line.push_str(&parts.join("-"));
    }
    line
}

pub fn parse_segmentation_line(line: &str, ctx: &str) -> Result<Segmentation> {
    let mut fields = line.split_whitespace();
    let id = fields
        .next()
        .ok_or_else(|| UwsError::parse(ctx, "missing utterance id"))?;
    let mut words = Vec::new();
    let mut index = 0usize;
    for f in fields {
        let mut units = Vec::new();
        for part in f.split('-') {
            let tok = if part.contains(':') {
                parse_timed(part, ctx)?
            } else {
                check_label(part).map_err(|e| UwsError::parse(ctx, e.to_string()))?;
                UnitToken::new(part, index as f64, (index + 1) as f64)
            };
            index += 1;
            units.push(tok);
        }
        words.push(Word::new(units));
    }
    let seg = Segmentation::new(id, words);
    seg.units()
        .validate()
        .map_err(|e| UwsError::parse(ctx, e.to_string()))?;
    Ok(seg)
}

pub fn write_segmentation_file(
    segs: &[Segmentation],
    path: impl AsRef<Path>,
    timestamped: bool,
) -> Result<()> {
    let mut out = String::new();
    for s in segs {
        let _ = writeln!(out, "{}", format_segmentation_line(s, timestamped));
    }
    write_text(path.as_ref(), &out)
}

pub fn read_segmentation_file(path: impl AsRef<Path>) -> Result<Vec<Segmentation>> {
    let path = path.as_ref();
    read_lines(path)?
        .into_iter()
        .map(|(n, l)| parse_segmentation_line(&l, &format!("{}:{n}", path.display())))
        .collect()
}

/// Per-frame labels of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    pub utterance_id: String,
    pub labels: Vec<String>,
}

pub fn write_frame_labels(items: &[FrameLabels], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&it.utterance_id);
        for l in &it.labels {
            out.push(' ');
            out.push_str(l);
        }
        out.push('\n');
    }
    write_text(path.as_ref(), &out)
}

pub fn read_frame_labels(path: impl AsRef<Path>) -> Result<Vec<FrameLabels>> {
    let path = path.as_ref();
    read_lines(path)?
        .into_iter()
        .map(|(n, l)| {
            let mut f = l.split_whitespace();
            let id = f
                .next()
                .ok_or_else(|| UwsError::parse(format!("{}:{n}", path.display()), "missing id"))?;
            Ok(FrameLabels {
                utterance_id: id.to_owned(),
                labels: f.map(str::to_owned).collect(),
            })
        })
        .collect()
}

//! Unified-diff parsing and application.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PatchError {
    #[error("malformed diff at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("hunk {hunk} does not match the source (expected near line {expected_line})")]
    ContextMismatch { hunk: usize, expected_line: usize },
    #[error("hunk {hunk} overlaps the previous hunk")]
    Overlap { hunk: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Op {
    Keep(String),
    Remove(String),
    Add(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    /// Line number from the `-` range of the header.
    pub old_start: usize,
    ops: Vec<Op>,
}

impl Hunk {
    fn old_lines(&self) -> impl Iterator<Item = &str> {
        self.ops.iter().filter_map(|o| match o {
            Op::Keep(s) | Op::Remove(s) => Some(s.as_str()),
            Op::Add(_) => None,
        })
    }

    fn new_lines(&self) -> impl Iterator<Item = &str> {
        self.ops.iter().filter_map(|o| match o {
            Op::Keep(s) | Op::Add(s) => Some(s.as_str()),
            Op::Remove(_) => None,
        })
    }

    pub fn old_len(&self) -> usize {
        self.old_lines().count()
    }
}

fn parse_range(text: &str, line: usize) -> Result<(usize, usize), PatchError> {
    let bad = || PatchError::Malformed { line, reason: format!("bad range '{text}'") };
    let (start, len) = match text.split_once(',') {
        Some((s, l)) => (s.parse().map_err(|_| bad())?, l.parse().map_err(|_| bad())?),
        None => (text.parse().map_err(|_| bad())?, 1),
    };
    Ok((start, len))
}

fn parse_header(text: &str, line: usize) -> Result<usize, PatchError> {
    let bad = |reason: &str| PatchError::Malformed { line, reason: reason.to_string() };
    let body = text.strip_prefix("@@ ").ok_or_else(|| bad("hunk header must start with '@@ '"))?;
    let end = body.find(" @@").ok_or_else(|| bad("hunk header is not closed"))?;
    let mut parts = body[..end].split(' ');
    let old = parts.next().and_then(|p| p.strip_prefix('-')).ok_or_else(|| bad("missing old range"))?;
    let new = parts.next().and_then(|p| p.strip_prefix('+')).ok_or_else(|| bad("missing new range"))?;
    if parts.next().is_some() {
        return Err(bad("extra fields in hunk header"));
    }
    let (old_start, old_len) = parse_range(old, line)?;
    parse_range(new, line)?;
    // Pure insertions after line `s` are written `-s,0`; store the first affected line.
    Ok(if old_len == 0 { old_start + 1 } else { old_start })
}

fn is_file_header(lines: &[&str], i: usize) -> bool {
    lines[i].starts_with("--- ") && lines.get(i + 1).is_some_and(|l| l.starts_with("+++ "))
}

/// Parses the hunks of a single-file unified diff. File headers and `diff`/`index`
/// preamble lines are accepted and ignored. Hunk bodies run to the next header, so
/// miscounted `@@` ranges are tolerated.
pub fn parse_diff(diff: &str) -> Result<Vec<Hunk>, PatchError> {
    let mut lines: Vec<&str> = diff.split('\n').collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    let last = lines.len();
    let mut hunks: Vec<Hunk> = Vec::new();
    let mut i = 0;
    while i < last {
        let line = lines[i];
        let lineno = i + 1;
        if line.starts_with("--- ") {
            if !is_file_header(&lines, i) {
                return Err(PatchError::Malformed { line: lineno, reason: "'---' header without '+++'".into() });
            }
            if !hunks.is_empty() {
                return Err(PatchError::Malformed { line: lineno, reason: "diff touches more than one file".into() });
            }
            i += 2;
            continue;
        }
        if line.starts_with("@@") {
            let old_start = parse_header(line, lineno)?;
            let mut ops = Vec::new();
            i += 1;
            while i < last && !lines[i].starts_with("@@") && !is_file_header(&lines, i) {
                let l = lines[i];
                let (kind, body) = match l.chars().next() {
                    Some(c @ (' ' | '-' | '+')) => (c, &l[1..]),
                    // Some generators drop the space of blank context lines.
                    None => (' ', ""),
                    Some('\\') => {
                        i += 1;
                        continue;
                    }
                    Some(_) => {
                        return Err(PatchError::Malformed { line: i + 1, reason: "unexpected line inside hunk".into() })
                    }
                };
                let no_newline = lines.get(i + 1).is_some_and(|n| n.starts_with('\\'));
                let text = if no_newline { body.to_string() } else { format!("{body}\n") };
                ops.push(match kind {
                    ' ' => Op::Keep(text),
                    '-' => Op::Remove(text),
                    _ => Op::Add(text),
                });
                i += if no_newline { 2 } else { 1 };
            }
            if ops.is_empty() {
                return Err(PatchError::Malformed { line: lineno, reason: "empty hunk".into() });
            }
            hunks.push(Hunk { old_start, ops });
            continue;
        }
        if hunks.is_empty() && (line.is_empty() || line.starts_with("diff ") || line.starts_with("index ")) {
            i += 1;
            continue;
        }
        return Err(PatchError::Malformed { line: lineno, reason: format!("unexpected line '{line}'") });
    }
    Ok(hunks)
}

/// Applies a unified diff. Each hunk must match the source exactly; when the stated
/// position is off, the nearest exact match after the previous hunk is used.
pub fn apply_patch(source: &str, diff: &str) -> Result<String, PatchError> {
    let hunks = parse_diff(diff)?;
    for (k, w) in hunks.windows(2).enumerate() {
        if w[1].old_start < w[0].old_start + w[0].old_len() {
            return Err(PatchError::Overlap { hunk: k + 2 });
        }
    }
    let src: Vec<&str> = source.split_inclusive('\n').collect();
    let mut out = String::with_capacity(source.len());
    let mut cursor = 0usize;
    for (k, h) in hunks.iter().enumerate() {
        let old: Vec<&str> = h.old_lines().collect();
        let stated = h.old_start.saturating_sub(1);
        let matches_at = |pos: usize| pos + old.len() <= src.len() && src[pos..pos + old.len()] == old[..];
        let pos = (0..=src.len())
            .filter(|&p| p >= cursor)
            .filter(|&p| matches_at(p))
            .min_by_key(|&p| p.abs_diff(stated))
            .ok_or(PatchError::ContextMismatch { hunk: k + 1, expected_line: stated + 1 })?;
        out.extend(src[cursor..pos].iter().copied());
        out.extend(h.new_lines());
        cursor = pos + old.len();
    }
    out.extend(src[cursor..].iter().copied());
    Ok(out)
}

/// Added and removed line counts.
pub fn diff_stats(diff: &str) -> Result<(usize, usize), PatchError> {
    let hunks = parse_diff(diff)?;
    let count = |f: fn(&Op) -> bool| hunks.iter().flat_map(|h| h.ops.iter()).filter(|o| f(o)).count();
    Ok((count(|o| matches!(o, Op::Add(_))), count(|o| matches!(o, Op::Remove(_)))))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SRC: &str = "a\nb\nc\nd\ne\n";

    #[test]
    fn empty_diff_is_identity() {
        assert_eq!(apply_patch(SRC, "").unwrap(), SRC);
        assert_eq!(apply_patch(SRC, "--- a/x\n+++ b/x\n").unwrap(), SRC);
    }

    #[test]
    fn single_line_replacement() {
        let out = apply_patch(SRC, "@@ -3 +3 @@\n-c\n+C\n").unwrap();
        assert_eq!(out, "a\nb\nC\nd\ne\n");
    }

    #[test]
    fn shifted_position_still_applies() {
        let out = apply_patch(SRC, "@@ -1,2 +1,2 @@\n c\n-d\n+D\n").unwrap();
        assert_eq!(out, "a\nb\nc\nD\ne\n");
    }

    #[test]
    fn insertion_and_deletion() {
        assert_eq!(apply_patch(SRC, "@@ -0,0 +1 @@\n+z\n").unwrap(), "z\na\nb\nc\nd\ne\n");
        assert_eq!(apply_patch(SRC, "@@ -5,0 +6 @@\n+f\n").unwrap(), "a\nb\nc\nd\ne\nf\n");
        assert_eq!(apply_patch(SRC, "@@ -2,2 +1,0 @@\n-b\n-c\n").unwrap(), "a\nd\ne\n");
    }

    #[test]
    fn missing_final_newline() {
        let diff = "@@ -2 +2 @@\n-y\n\\ No newline at end of file\n+y\n";
        assert_eq!(apply_patch("x\ny", diff).unwrap(), "x\ny\n");
        let diff = "@@ -2 +2 @@\n-y\n+z\n\\ No newline at end of file\n";
        assert_eq!(apply_patch("x\ny\n", diff).unwrap(), "x\nz");
    }

    #[test]
    fn errors() {
        assert!(matches!(apply_patch(SRC, "@@ -3 +3 @@\n-q\n+Q\n"), Err(PatchError::ContextMismatch { hunk: 1, .. })));
        let overlap = "@@ -2,2 +2,2 @@\n-b\n+B\n c\n@@ -3,1 +3,1 @@\n-c\n+C\n";
        assert_eq!(apply_patch(SRC, overlap), Err(PatchError::Overlap { hunk: 2 }));
        assert!(matches!(apply_patch(SRC, "@@ -x +1 @@\n"), Err(PatchError::Malformed { .. })));
        assert!(matches!(apply_patch(SRC, "--- a\n@@ -1 +1 @@\n-a\n+b\n"), Err(PatchError::Malformed { .. })));
        assert!(matches!(apply_patch(SRC, "@@ -1 +1 @@\n"), Err(PatchError::Malformed { .. })));
        assert!(matches!(apply_patch(SRC, "@@ -1 +1 @@\n-a\n*a\n"), Err(PatchError::Malformed { .. })));
    }

    #[test]
    fn stats() {
        assert_eq!(diff_stats("@@ -2,2 +2,3 @@\n-b\n+B\n+B2\n c\n").unwrap(), (2, 1));
    }
}

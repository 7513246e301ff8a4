//! Deterministic clean-up of raw proposer output.
//!
//! Rules, applied in order:
//! 1. A line whose trimmed start begins with three backticks is a fence. Fences
//!    alternate between opening and closing a block; an unclosed block runs to
//!    the end of the text. The opening fence's language tag is discarded.
//! 2. If any block has a non-blank body, the longest body (bytes, first on
//!    ties) is selected. Otherwise the fence lines are dropped and the
//!    remaining text is used.
//! 3. Leading lines that are blank or open with conversational framing
//!    ("Here is", "Sure", ...) are removed, as are trailing lines that are blank
//!    or close with framing ("Let me know", "Hope this helps", ...).
//! 4. The result is trimmed.
//!
//! The output never contains a fence line, so `refine` is idempotent.

const LEADING_FRAMING: &[&str] = &[
    "here is",
    "here's",
    "here are",
    "sure",
    "certainly",
    "of course",
    "below is",
];

const TRAILING_FRAMING: &[&str] = &["let me know", "hope this helps", "i hope this", "feel free to"];

fn is_fence(line: &str) -> bool {
    line.trim_start().starts_with("```")
}

fn starts_with_phrase(line: &str, phrases: &[&str]) -> bool {
    let lower = line.trim_start().to_lowercase();
    phrases
        .iter()
        .any(|p| lower.starts_with(p) && !lower[p.len()..].chars().next().is_some_and(char::is_alphanumeric))
}

fn strip_framing(text: &str) -> String {
    let lines: Vec<&str> = text.lines().collect();
    let keep = |l: &&str, phrases: &[&str]| !l.trim().is_empty() && !starts_with_phrase(l, phrases);
    let Some(start) = lines.iter().position(|l| keep(l, LEADING_FRAMING)) else {
        return String::new();
    };
    let end = lines
        .iter()
        .rposition(|l| keep(l, TRAILING_FRAMING))
        .filter(|end| *end >= start);
    match end {
        Some(end) => lines[start..=end].join("\n").trim().to_string(),
        None => String::new(),
    }
}

fn fenced_blocks(text: &str) -> (bool, Vec<Vec<&str>>) {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    let mut any_fence = false;
    for line in text.lines() {
        if is_fence(line) {
            any_fence = true;
            match current.take() {
                Some(body) => blocks.push(body),
                None => current = Some(Vec::new()),
            }
        } else if let Some(body) = current.as_mut() {
            body.push(line);
        }
    }
    if let Some(body) = current {
        blocks.push(body);
    }
    (any_fence, blocks)
}

/// Extracts the artifact from raw proposer output.
pub fn refine(raw: &str) -> String {
    let (any_fence, blocks) = fenced_blocks(raw);
    if !any_fence {
        return strip_framing(raw);
    }
    let mut best: Option<String> = None;
    for body in blocks {
        let joined = body.join("\n");
        if joined.trim().is_empty() {
            continue;
        }
        if best.as_ref().is_none_or(|b| joined.len() > b.len()) {
            best = Some(joined);
        }
    }
    match best {
        Some(body) => strip_framing(&body),
        None => {
            let rest: Vec<&str> = raw.lines().filter(|l| !is_fence(l)).collect();
            strip_framing(&rest.join("\n"))
        }
    }
}

//! Reflection prompt rendering.
//!
//! The template is original to this crate and identified by [`TEMPLATE_ID`],
//! which checkpoints record so a resumed run keeps rendering the same way.

use std::fmt::Write as _;

use crate::model::{ImageRef, SideInfo, SideInfoValue};

use super::ReflectionContext;

pub const TEMPLATE_ID: &str = "reflect-v1";

/// A fence longer than any backtick run inside `text`.
fn fence_for(text: &str) -> String {
    let mut longest = 0;
    let mut run = 0;
    for c in text.chars() {
        if c == '`' {
            run += 1;
            longest = longest.max(run);
        } else {
            run = 0;
        }
    }
    "`".repeat((longest + 1).max(3))
}

fn fenced(out: &mut String, text: &str, indent: &str) {
    let fence = fence_for(text);
    let _ = writeln!(out, "{indent}{fence}");
    for line in text.lines() {
        let _ = writeln!(out, "{indent}{line}");
    }
    let _ = writeln!(out, "{indent}{fence}");
}

fn render_side_info(out: &mut String, si: &SideInfo, images: &mut Vec<ImageRef>) {
    for (name, value) in si.iter() {
        match value {
            SideInfoValue::Text(t) if !t.contains('\n') => {
                let _ = writeln!(out, "- {name}: {t}");
            }
            SideInfoValue::Text(t) => {
                let _ = writeln!(out, "- {name}:");
                fenced(out, t, "  ");
            }
            SideInfoValue::Number(v) => {
                let _ = writeln!(out, "- {name}: {v}");
            }
            SideInfoValue::SubScores(m) => {
                let _ = writeln!(out, "- {name}:");
                for (k, v) in m {
                    let _ = writeln!(out, "  - {k}: {v}");
                }
            }
            SideInfoValue::Table(rows) => {
                let _ = writeln!(out, "- {name}: ({} rows)", rows.len());
                for row in rows {
                    let cells: Vec<String> = row.iter().map(|(k, v)| format!("{k}={v}")).collect();
                    let _ = writeln!(out, "  - {}", cells.join(", "));
                }
            }
            SideInfoValue::ImageRef(img) => {
                images.push(img.clone());
                let _ = writeln!(out, "- {name}: [image attachment {}: {}]", images.len(), img.media_type);
            }
        }
    }
}

/// Renders the prompt and collects image attachments in placeholder order.
pub fn render_with_attachments(ctx: &ReflectionContext) -> (String, Vec<ImageRef>) {
    let mut out = String::new();
    let mut images = Vec::new();
    out.push_str("You are improving a text artifact using evaluation feedback.\n");
    if let Some(objective) = &ctx.objective {
        let _ = write!(out, "\n## Objective\n{objective}\n");
    }
    if let Some(background) = &ctx.background {
        let _ = write!(out, "\n## Background\n{background}\n");
    }
    let Some(parent) = &ctx.parent_text else {
        out.push_str(
            "\n## Instructions\nWrite a first version of the artifact that meets the objective. \
             Respond with the complete artifact inside a single fenced code block and nothing else.\n",
        );
        return (out, images);
    };
    out.push_str("\n## Current artifact\n");
    fenced(&mut out, parent, "");
    if !ctx.minibatch.is_empty() {
        out.push_str("\n## Evaluation feedback\n");
        for (i, entry) in ctx.minibatch.iter().enumerate() {
            let _ = writeln!(out, "\n### Evaluation {}: {}", i + 1, entry.summary);
            let _ = writeln!(out, "Score: {}", entry.score);
            render_side_info(&mut out, &entry.side_info, &mut images);
        }
    }
    if !ctx.frontier_digest.is_empty() {
        out.push_str("\n## Other strong candidates\n");
        for entry in &ctx.frontier_digest {
            let _ = writeln!(
                out,
                "\n### Candidate {} (mean score {})",
                entry.candidate_id, entry.aggregate
            );
            fenced(&mut out, &entry.text, "");
        }
    }
    out.push_str(
        "\n## Instructions\nDiagnose what limits the score using the feedback above, then write an \
         improved version of the current artifact. Respond with the complete improved artifact \
         inside a single fenced code block and nothing else.\n",
    );
    (out, images)
}

pub fn render_reflection_prompt(ctx: &ReflectionContext) -> String {
    render_with_attachments(ctx).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CandidateId, ImageRef};
    use crate::proposer::{FrontierEntry, MinibatchEntry};
    use indexmap::IndexMap;

    fn ctx() -> ReflectionContext {
        let mut si = SideInfo::new();
        let mut subs = IndexMap::new();
        subs.insert("a".to_string(), 0.1);
        subs.insert("b".to_string(), 0.9);
        si.insert("scores", SideInfoValue::SubScores(subs)).unwrap();
        si.insert("Error", SideInfoValue::Text("line1\nline2".into())).unwrap();
        ReflectionContext {
            parent_text: Some("print('hi')".into()),
            objective: Some("Be fast".into()),
            background: None,
            minibatch: vec![MinibatchEntry {
                example_id: Some("e1".into()),
                summary: "example e1".into(),
                score: 0.25,
                side_info: si,
            }],
            frontier_digest: vec![],
        }
    }

    #[test]
    fn omits_absent_background() {
        let p = render_reflection_prompt(&ctx());
        assert!(p.contains("## Objective\nBe fast"));
        assert!(!p.contains("Background"));
    }

    #[test]
    fn sub_scores_in_insertion_order() {
        let p = render_reflection_prompt(&ctx());
        let a = p.find("  - a: 0.1").unwrap();
        let b = p.find("  - b: 0.9").unwrap();
        assert!(a < b);
    }

    #[test]
    fn deterministic_and_score_sensitive() {
        assert_eq!(render_reflection_prompt(&ctx()), render_reflection_prompt(&ctx()));
        let mut other = ctx();
        other.minibatch[0].score = 0.25000000000000006;
        assert_ne!(render_reflection_prompt(&ctx()), render_reflection_prompt(&other));
    }

    #[test]
    fn section_order() {
        let mut c = ctx();
        c.background = Some("bg".into());
        c.frontier_digest.push(FrontierEntry {
            candidate_id: CandidateId(3),
            aggregate: 0.5,
            text: "alt".into(),
        });
        let p = render_reflection_prompt(&c);
        let order = [
            "## Objective",
            "## Background",
            "## Current artifact",
            "## Evaluation feedback",
            "## Other strong candidates",
            "## Instructions",
        ];
        let positions: Vec<usize> = order.iter().map(|h| p.find(h).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn artifact_fence_outgrows_inner_backticks() {
        let mut c = ctx();
        c.parent_text = Some("```\ninner\n```".into());
        let p = render_reflection_prompt(&c);
        assert!(p.contains("````\n```\ninner\n```\n````"));
    }

    #[test]
    fn images_become_placeholders_and_attachments() {
        let mut c = ctx();
        c.minibatch[0]
            .side_info
            .insert(
                "render",
                SideInfoValue::ImageRef(ImageRef::from_bytes("image/png", b"png")),
            )
            .unwrap();
        let (p, images) = render_with_attachments(&c);
        assert!(p.contains("- render: [image attachment 1: image/png]"));
        assert_eq!(images.len(), 1);
    }

    #[test]
    fn bootstrap_prompt_has_no_artifact_section() {
        let c = ReflectionContext::bootstrap("Draw a unicorn".into(), Some("use build123d".into()));
        let p = render_reflection_prompt(&c);
        assert!(p.contains("Draw a unicorn"));
        assert!(p.contains("use build123d"));
        assert!(!p.contains("Current artifact"));
    }
}

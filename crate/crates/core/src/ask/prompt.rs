//! Role-play prompt templates.

use log::info;

use crate::data::{Item, UserRecord};
use crate::error::{Error, Result};

/// The shipped template. Its wording is a reconstruction, not a transcript.
pub const DEFAULT_TEMPLATE: &str = include_str!("../../assets/roleplay_prompt.txt");

pub const DEFAULT_POST_BUDGET: usize = 6000;

const PLACEHOLDERS: [&str; 5] = ["posts", "q", "lo", "hi", "label"];

#[derive(Debug, PartialEq)]
enum Segment<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn parse(template: &str) -> Result<Vec<Segment<'_>>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else {
            return Err(Error::Template("unterminated `{`".into()));
        };
        let name = &after[..close];
        if !PLACEHOLDERS.contains(&name) {
            return Err(Error::Template(format!("unresolved placeholder `{{{name}}}`")));
        }
        if open > 0 {
            out.push(Segment::Text(&rest[..open]));
        }
        out.push(Segment::Slot(name));
        rest = &after[close + 1..];
    }
    if !rest.is_empty() {
        out.push(Segment::Text(rest));
    }
    Ok(out)
}

/// Strip `#` comment lines, and drop lines mentioning `{label}` when the
/// label is withheld.
fn preprocess(template: &str, include_label: bool) -> String {
    template
        .lines()
        .filter(|l| !l.starts_with('#'))
        .filter(|l| include_label || !l.contains("{label}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Join posts one per line, stopping at `budget` characters.
pub fn join_posts(posts: &[String], budget: usize) -> String {
    let mut out = String::new();
    let mut used = 0usize;
    for (i, post) in posts.iter().enumerate() {
        let sep = usize::from(i > 0);
        let len = post.chars().count();
        if used + sep + len > budget {
            let room = budget.saturating_sub(used + sep);
            if room > 0 {
                if sep == 1 {
                    out.push('\n');
                }
                out.extend(post.chars().take(room));
            }
            info!(
                "posts truncated to {budget} characters ({} of {} posts kept whole)",
                i,
                posts.len()
            );
            return out;
        }
        if sep == 1 {
            out.push('\n');
        }
        out.push_str(post);
        used += sep + len;
    }
    out
}

pub fn render_prompt(
    template: &str,
    user: &UserRecord,
    item: &Item,
    include_label: bool,
    post_budget: usize,
) -> Result<String> {
    let text = preprocess(template, include_label);
    let segments = parse(&text)?;
    let label = if include_label {
        if !segments.contains(&Segment::Slot("label")) {
            return Err(Error::Template("label requested but template has no `{label}`".into()));
        }
        let labels = user
            .labels
            .ok_or_else(|| Error::Template(format!("user `{}` has no labels to condition on", user.user_id)))?;
        labels.type_string()
    } else {
        String::new()
    };

    let mut out = String::new();
    for seg in segments {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Slot("posts") => out.push_str(&join_posts(&user.posts, post_budget)),
            Segment::Slot("q") => out.push_str(&item.text),
            Segment::Slot("lo") => out.push_str(&item.scale_min.to_string()),
            Segment::Slot("hi") => out.push_str(&item.scale_max.to_string()),
            Segment::Slot("label") => out.push_str(&label),
            Segment::Slot(other) => unreachable!("placeholder {other} validated in parse"),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dimension, Labels};

    fn user(posts: Vec<String>) -> UserRecord {
        UserRecord {
            user_id: "u1".into(),
            posts,
            labels: Some(Labels([1, 1, 1, 0])),
            split: None,
        }
    }

    fn item() -> Item {
        Item {
            item_id: "Q41".into(),
            text: "You avoid making phone calls.".into(),
            construct: Dimension::IE,
            scale_min: 1,
            scale_max: 7,
        }
    }

    #[test]
    fn substitutes_posts_verbatim() {
        let u = user(vec!["first post {q}".into(), "second post".into()]);
        let out = render_prompt("POSTS:{posts} Q:{q} SCALE:{lo}-{hi}", &u, &item(), false, 1000).unwrap();
        assert!(out.contains("first post {q}"));
        assert!(out.contains("second post"));
        assert!(out.ends_with("Q:You avoid making phone calls. SCALE:1-7"));
    }

    #[test]
    fn withheld_label_leaves_no_label_token() {
        let u = user(vec!["hello".into()]);
        let out = render_prompt(DEFAULT_TEMPLATE, &u, &item(), false, 1000).unwrap();
        assert!(!out.contains("ISTJ"));
        assert!(!out.contains("MBTI type"));
        let out = render_prompt(DEFAULT_TEMPLATE, &u, &item(), true, 1000).unwrap();
        assert!(out.contains("ISTJ"));
        assert!(!out.contains('#'));
    }

    #[test]
    fn label_requires_placeholder_and_labels() {
        let u = user(vec!["hello".into()]);
        assert!(render_prompt("{posts}", &u, &item(), true, 100).is_err());
        let mut unlabeled = u.clone();
        unlabeled.labels = None;
        assert!(render_prompt("{posts} {label}", &unlabeled, &item(), true, 100).is_err());
    }

    #[test]
    fn unresolved_placeholder_errors() {
        let u = user(vec!["hello".into()]);
        assert!(matches!(
            render_prompt("{posts} {mood}", &u, &item(), false, 100),
            Err(Error::Template(_))
        ));
        assert!(render_prompt("{posts", &u, &item(), false, 100).is_err());
    }

    #[test]
    fn long_history_respects_budget() {
        let posts: Vec<String> = (0..100).map(|i| format!("post number {i} {}", "x".repeat(80))).collect();
        let template = "POSTS:{posts} Q:{q} SCALE:{lo}-{hi}";
        let budget = 1500;
        let out = render_prompt(template, &user(posts), &item(), false, budget).unwrap();
        let overhead = template.len() + item().text.len();
        assert!(out.chars().count() <= budget + overhead, "{} chars", out.chars().count());
        assert!(out.contains("post number 0 "));
        assert!(!out.contains("post number 99 "));
    }

    #[test]
    fn budget_cut_is_char_safe() {
        let out = join_posts(&["ééééé".to_string(), "ü".repeat(10)], 8);
        assert_eq!(out.chars().count(), 8);
    }
}

//! Slash-delimited names and topic patterns.
//!
//! A name is one or more non-empty segments of `[A-Za-z0-9_.-]` joined by
//! `/`. A pattern is the same grammar where a segment may also be `*`, which
//! matches exactly one segment.

use std::fmt;

fn segment_ok(seg: &str) -> bool {
    !seg.is_empty()
        && seg
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

/// True for a well-formed concrete name (no wildcards).
pub fn is_valid_name(name: &str) -> bool {
    !name.is_empty() && name.split('/').all(segment_ok)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicPattern {
    raw: String,
    segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Segment {
    Literal(String),
    Any,
}

impl TopicPattern {
    pub fn parse(pattern: &str) -> Option<Self> {
        if pattern.is_empty() {
            return None;
        }
        let mut segments = Vec::new();
        for seg in pattern.split('/') {
            if seg == "*" {
                segments.push(Segment::Any);
            } else if segment_ok(seg) {
                segments.push(Segment::Literal(seg.to_string()));
            } else {
                return None;
            }
        }
        Some(TopicPattern {
            raw: pattern.to_string(),
            segments,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn matches(&self, topic: &str) -> bool {
        let mut parts = topic.split('/');
        for seg in &self.segments {
            match (seg, parts.next()) {
                (_, None) => return false,
                (Segment::Any, Some(_)) => {}
                (Segment::Literal(l), Some(p)) if l == p => {}
                _ => return false,
            }
        }
        parts.next().is_none()
    }
}

impl fmt::Display for TopicPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn names() {
        assert!(is_valid_name("sup/shot_director"));
        assert!(is_valid_name("fep/beam03/motor"));
        assert!(!is_valid_name(""));
        assert!(!is_valid_name("a//b"));
        assert!(!is_valid_name("/a"));
        assert!(!is_valid_name("a/*"));
        assert!(!is_valid_name("a b"));
    }

    #[test]
    fn single_level_wildcard() {
        let p = TopicPattern::parse("status/beam01/*").unwrap();
        assert!(p.matches("status/beam01/motor"));
        assert!(!p.matches("status/beam02/motor"));
        assert!(!p.matches("status/beam01"));
        assert!(!p.matches("status/beam01/motor/x"));
        let all = TopicPattern::parse("alert/*").unwrap();
        assert!(all.matches("alert/critical"));
        assert!(TopicPattern::parse("a/**").is_none());
        assert!(TopicPattern::parse("").is_none());
    }

    proptest! {
        #[test]
        fn literal_pattern_matches_only_itself(
            a in "[a-z]{1,4}(/[a-z0-9]{1,3}){0,3}",
            b in "[a-z]{1,4}(/[a-z0-9]{1,3}){0,3}",
        ) {
            let p = TopicPattern::parse(&a).unwrap();
            prop_assert!(p.matches(&a));
            prop_assert_eq!(p.matches(&b), a == b);
        }

        #[test]
        fn wildcard_replaces_any_one_segment(
            topic in "[a-z]{1,4}(/[a-z0-9]{1,3}){1,3}",
            idx in 0usize..4,
        ) {
            let segs: Vec<&str> = topic.split('/').collect();
            let i = idx % segs.len();
            let mut pat: Vec<&str> = segs.clone();
            pat[i] = "*";
            let p = TopicPattern::parse(&pat.join("/")).unwrap();
            prop_assert!(p.matches(&topic));
        }
    }
}

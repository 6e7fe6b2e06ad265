//! Topic names and wildcard filters.
//!
//! Levels are `/`-separated and match `[A-Za-z0-9_-]+`. Filters may use `+`
//! for exactly one level and `#` as the final level for any suffix
//! (including none, so `a/#` matches `a`).

use std::fmt;

use thiserror::Error;

use crate::thermal::is_valid_id;

const SEPARATOR: char = '/';

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopicError {
    #[error("invalid topic {0:?}")]
    Name(String),
    #[error("invalid topic filter {0:?}")]
    Filter(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicName(String);

impl TopicName {
    pub fn parse(s: &str) -> Result<Self, TopicError> {
        if s.split(SEPARATOR).all(is_valid_id) {
            Ok(Self(s.to_owned()))
        } else {
            Err(TopicError::Name(s.to_owned()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn levels(&self) -> impl Iterator<Item = &str> {
        self.0.split(SEPARATOR)
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Segment {
    Level(String),
    Any,
    Rest,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicFilter {
    raw: String,
    segments: Vec<Segment>,
}

impl TopicFilter {
    pub fn parse(s: &str) -> Result<Self, TopicError> {
        let parts: Vec<&str> = s.split(SEPARATOR).collect();
        let mut segments = Vec::with_capacity(parts.len());
        for (i, part) in parts.iter().enumerate() {
            let seg = match *part {
                "+" => Segment::Any,
                "#" if i + 1 == parts.len() => Segment::Rest,
                p if is_valid_id(p) => Segment::Level(p.to_owned()),
                _ => return Err(TopicError::Filter(s.to_owned())),
            };
            segments.push(seg);
        }
        Ok(Self {
            raw: s.to_owned(),
            segments,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn matches(&self, topic: &TopicName) -> bool {
        let mut levels = topic.levels();
        for seg in &self.segments {
            match seg {
                Segment::Rest => return true,
                Segment::Any => {
                    if levels.next().is_none() {
                        return false;
                    }
                }
                Segment::Level(want) => match levels.next() {
                    Some(level) if level == want => {}
                    _ => return false,
                },
            }
        }
        levels.next().is_none()
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

/// Extracts the second level of a `prefix/{id}/suffix..` topic when it matches.
pub fn capture_id<'a>(topic: &'a TopicName, prefix: &str, suffix: &[&str]) -> Option<&'a str> {
    let levels: Vec<&str> = topic.levels().collect();
    if levels.len() != 2 + suffix.len() || levels[0] != prefix {
        return None;
    }
    if levels[2..].iter().zip(suffix).all(|(a, b)| a == b) {
        Some(levels[1])
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(filter: &str, topic: &str) -> bool {
        TopicFilter::parse(filter)
            .unwrap()
            .matches(&TopicName::parse(topic).unwrap())
    }

    #[test]
    fn wildcard_semantics() {
        assert!(m("locations/+/delta", "locations/L1/delta"));
        assert!(!m("locations/+/delta", "locations/L1/x/delta"));
        assert!(m("locations/#", "locations/L1/occupancy"));
        assert!(m("locations/#", "locations"));
        assert!(!m("locations/#", "devices/d1/hello"));
        assert!(m("#", "a/b/c"));
        assert!(m("+/+", "a/b"));
        assert!(!m("+", "a/b"));
        assert!(!m("a/b", "a"));
    }

    #[test]
    fn validation() {
        for bad in ["", "a//b", "a/", "/a", "a b", "a/+/b", "a/#"] {
            assert!(TopicName::parse(bad).is_err(), "{bad}");
        }
        for bad in ["", "a/#/b", "a/b+", "a//b", "#/a"] {
            assert!(TopicFilter::parse(bad).is_err(), "{bad}");
        }
        assert!(TopicFilter::parse("+/#").is_ok());
    }

    #[test]
    fn capture() {
        let t = TopicName::parse("devices/d-1/config/type").unwrap();
        assert_eq!(capture_id(&t, "devices", &["config", "type"]), Some("d-1"));
        assert_eq!(capture_id(&t, "devices", &["hello"]), None);
    }
}

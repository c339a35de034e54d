//! Topic name and topic filter validation and matching.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopicError {
    #[error("topic is empty")]
    Empty,
    #[error("topic is longer than 65535 bytes")]
    TooLong,
    #[error("topic contains U+0000")]
    NullCharacter,
    #[error("topic name {0:?} contains a wildcard")]
    WildcardInName(String),
    #[error("invalid topic filter {0:?}")]
    InvalidFilter(String),
}

fn check_common(s: &str) -> Result<(), TopicError> {
    if s.is_empty() {
        return Err(TopicError::Empty);
    }
    if s.len() > u16::MAX as usize {
        return Err(TopicError::TooLong);
    }
    if s.contains('\0') {
        return Err(TopicError::NullCharacter);
    }
    Ok(())
}

/// A topic name is what a PUBLISH carries: nonempty and wildcard-free.
pub fn validate_topic_name(name: &str) -> Result<(), TopicError> {
    check_common(name)?;
    if name.contains(['+', '#']) {
        return Err(TopicError::WildcardInName(name.to_owned()));
    }
    Ok(())
}

/// `+` must occupy a whole level; `#` must occupy the whole final level.
pub fn validate_topic_filter(filter: &str) -> Result<(), TopicError> {
    check_common(filter)?;
    let mut levels = filter.split('/').peekable();
    while let Some(level) = levels.next() {
        let is_last = levels.peek().is_none();
        let ok = match level {
            "+" => true,
            "#" => is_last,
            other => !other.contains(['+', '#']),
        };
        if !ok {
            return Err(TopicError::InvalidFilter(filter.to_owned()));
        }
    }
    Ok(())
}

pub fn has_wildcards(s: &str) -> bool {
    s.contains(['+', '#'])
}

/// True iff `topic` is matched by `filter`.
///
/// `+` matches exactly one level, `#` matches the parent level and any number
/// of trailing levels. Filters starting with a wildcard do not match topics
/// starting with `$`.
pub fn topic_matches(filter: &str, topic: &str) -> Result<bool, TopicError> {
    validate_topic_filter(filter)?;
    validate_topic_name(topic)?;
    Ok(matches_unchecked(filter, topic))
}

/// Matching without validation; both arguments must already be valid.
pub(crate) fn matches_unchecked(filter: &str, topic: &str) -> bool {
    if topic.starts_with('$') && filter.starts_with(['+', '#']) {
        return false;
    }
    let mut topic_levels = topic.split('/');
    for f in filter.split('/') {
        if f == "#" {
            return true;
        }
        match topic_levels.next() {
            Some(_) if f == "+" => {}
            Some(t) if t == f => {}
            _ => return false,
        }
    }
    topic_levels.next().is_none()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wildcard_examples() {
        assert!(topic_matches("home/+/flame", "home/kitchen/flame").unwrap());
        assert!(topic_matches("home/#", "home/kitchen/oven/relay").unwrap());
        assert!(!topic_matches("home/+", "home/kitchen/flame").unwrap());
        assert!(topic_matches("home/#", "home").unwrap());
        assert!(topic_matches("#", "a/b/c").unwrap());
        assert!(!topic_matches("home/kitchen", "home/kitchen/flame").unwrap());
        assert!(!topic_matches("home/kitchen/flame/#", "home/kitchen").unwrap());
    }

    #[test]
    fn dollar_topics_hidden_from_leading_wildcards() {
        assert!(!topic_matches("#", "$SYS/uptime").unwrap());
        assert!(!topic_matches("+/uptime", "$SYS/uptime").unwrap());
        assert!(topic_matches("$SYS/#", "$SYS/uptime").unwrap());
    }

    #[test]
    fn invalid_filters_rejected() {
        for bad in ["", "a/#/b", "a#", "a/b+", "+a", "#/a"] {
            assert!(validate_topic_filter(bad).is_err(), "{bad:?}");
        }
        for good in ["#", "+", "a/+/b", "a//b", "/", "+/+/#"] {
            assert!(validate_topic_filter(good).is_ok(), "{good:?}");
        }
        assert!(topic_matches("a/#/b", "a/x/b").is_err());
    }

    #[test]
    fn names_reject_wildcards() {
        assert!(validate_topic_name("a/+").is_err());
        assert!(validate_topic_name("a/#").is_err());
        assert!(validate_topic_name("").is_err());
        assert!(validate_topic_name("a/b").is_ok());
    }
}

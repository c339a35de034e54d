//! Exhaustive comparison of `topic_matches` against an enumeration oracle:
//! for each filter, list every concrete topic it can stand for and test
//! membership.

use std::collections::BTreeSet;

use aal_mqtt::topic::{topic_matches, validate_topic_filter};

const MAX_LEVELS: usize = 4;

fn sequences(alphabet: &[&str], min: usize, max: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<String>> = vec![vec![]];
    for len in 0..=max {
        if len >= min {
            out.extend(frontier.iter().cloned());
        }
        frontier = frontier
            .iter()
            .flat_map(|prefix| {
                alphabet.iter().map(move |sym| {
                    let mut next = prefix.clone();
                    next.push(sym.to_string());
                    next
                })
            })
            .collect();
    }
    out
}

fn oracle_valid(filter: &[String]) -> bool {
    filter
        .iter()
        .enumerate()
        .all(|(i, l)| l != "#" || i == filter.len() - 1)
}

/// Every topic (levels from {a, b}, at most MAX_LEVELS) the filter stands for.
fn expand(filter: &[String]) -> BTreeSet<Vec<String>> {
    let mut partial: Vec<Vec<String>> = vec![vec![]];
    for level in filter {
        partial = match level.as_str() {
            "+" => partial
                .into_iter()
                .flat_map(|p| {
                    ["a", "b"].into_iter().map(move |s| {
                        let mut n = p.clone();
                        n.push(s.to_string());
                        n
                    })
                })
                .collect(),
            "#" => partial
                .into_iter()
                .flat_map(|p| {
                    let room = MAX_LEVELS.saturating_sub(p.len());
                    sequences(&["a", "b"], 0, room).into_iter().map(move |tail| {
                        let mut n = p.clone();
                        n.extend(tail);
                        n
                    })
                })
                .collect(),
            literal => partial
                .into_iter()
                .map(|mut p| {
                    p.push(literal.to_string());
                    p
                })
                .collect(),
        };
    }
    partial
        .into_iter()
        .filter(|t| !t.is_empty() && t.len() <= MAX_LEVELS)
        .collect()
}

#[test]
fn exhaustive_agreement_with_enumeration_oracle() {
    let filters = sequences(&["a", "b", "+", "#"], 1, MAX_LEVELS);
    let topics = sequences(&["a", "b"], 1, MAX_LEVELS);
    let mut pairs = 0usize;
    let mut disagreements = Vec::new();
    for filter in &filters {
        let filter_str = filter.join("/");
        let valid = oracle_valid(filter);
        assert_eq!(validate_topic_filter(&filter_str).is_ok(), valid, "{filter_str}");
        let expected = expand(filter);
        for topic in &topics {
            pairs += 1;
            let topic_str = topic.join("/");
            let got = topic_matches(&filter_str, &topic_str);
            match (valid, got) {
                (false, Err(_)) => {}
                (true, Ok(m)) if m == expected.contains(topic) => {}
                (_, other) => disagreements.push(format!("{filter_str} vs {topic_str}: {other:?}")),
            }
        }
    }
    assert_eq!(filters.len(), 340);
    assert_eq!(topics.len(), 30);
    assert_eq!(pairs, 10_200);
    assert!(disagreements.is_empty(), "{disagreements:#?}");
}

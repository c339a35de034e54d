use std::collections::BTreeMap;

use super::session::Message;
use crate::topic;

/// Last retained message per topic.
#[derive(Debug, Clone, Default)]
pub struct RetainedStore {
    by_topic: BTreeMap<String, Message>,
}

impl RetainedStore {
    /// An empty payload clears the topic.
    pub fn update(&mut self, message: &Message) {
        if message.payload.is_empty() {
            self.by_topic.remove(&message.topic);
        } else {
            self.by_topic.insert(message.topic.clone(), message.clone());
        }
    }

    pub fn get(&self, topic_name: &str) -> Option<&Message> {
        self.by_topic.get(topic_name)
    }

    pub fn len(&self) -> usize {
        self.by_topic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_topic.is_empty()
    }

    /// Retained messages matched by `filter`, in topic order.
    pub fn matching<'a>(&'a self, filter: &'a str) -> impl Iterator<Item = &'a Message> + 'a {
        self.by_topic
            .values()
            .filter(move |m| topic::matches_unchecked(filter, &m.topic))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Message> {
        self.by_topic.values()
    }
}

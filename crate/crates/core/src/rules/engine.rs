use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::time::Duration;

use aal_mqtt::topic_matches;
use tracing::{info, warn};

use super::config::{Action, NotifySpec, Rule, RuleSet};
use crate::notification::{Confirmation, Notification, CONFIRM_TOPIC};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingConfirmation {
    pub rule_id: String,
    pub notif_id: u64,
    pub deadline: Duration,
}

/// Something the engine wants published.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Emitted {
    Actuate {
        rule_id: String,
        topic: String,
        value: String,
    },
    Notify {
        rule_id: String,
        notification: Notification,
    },
}

impl Emitted {
    pub fn rule_id(&self) -> &str {
        match self {
            Emitted::Actuate { rule_id, .. } | Emitted::Notify { rule_id, .. } => rule_id,
        }
    }

    /// Topic and payload to publish.
    pub fn to_publish(&self) -> (String, String) {
        match self {
            Emitted::Actuate { topic, value, .. } => (topic.clone(), value.clone()),
            Emitted::Notify { notification, .. } => (notification.topic(), notification.to_json()),
        }
    }
}

impl fmt::Display for Emitted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Emitted::Actuate {
                rule_id,
                topic,
                value,
            } => write!(f, "{rule_id} actuate {topic} {value}"),
            Emitted::Notify {
                rule_id,
                notification: n,
            } => {
                write!(f, "{rule_id} notify #{} {} {}", n.notif_id, n.modality, n.asset_ref)?;
                if let Some(text) = &n.text {
                    write!(f, " {text:?}")?;
                }
                if n.confirm_rule.is_some() {
                    f.write_str(" awaiting-confirm")?;
                }
                Ok(())
            }
        }
    }
}

/// Evaluates a [`RuleSet`] against incoming messages. Deterministic: the
/// output depends only on the rules, the message sequence and the times
/// passed in.
#[derive(Debug)]
pub struct RuleEngine {
    rules: RuleSet,
    next_notif_id: u64,
    last_fired: HashMap<String, Duration>,
    pending: BTreeMap<String, PendingConfirmation>,
}

impl RuleEngine {
    pub fn new(rules: RuleSet) -> Self {
        Self::with_first_id(rules, 1)
    }

    /// Starts notification ids at `first_id`.
    pub fn with_first_id(rules: RuleSet, first_id: u64) -> Self {
        RuleEngine {
            rules,
            next_notif_id: first_id,
            last_fired: HashMap::new(),
            pending: BTreeMap::new(),
        }
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    pub fn pending(&self) -> impl Iterator<Item = &PendingConfirmation> {
        self.pending.values()
    }

    /// Routes a broker message: `patient/confirm` bodies go to
    /// [`on_confirm`](Self::on_confirm), everything else to
    /// [`on_event`](Self::on_event).
    pub fn handle_message(&mut self, topic: &str, payload: &[u8], now: Duration) -> Vec<Emitted> {
        if topic == CONFIRM_TOPIC {
            return match serde_json::from_slice::<Confirmation>(payload) {
                Ok(c) => self.on_confirm(&c.rule_id, c.notif_id, now),
                Err(e) => {
                    warn!(error = %e, "malformed confirmation dropped");
                    Vec::new()
                }
            };
        }
        match std::str::from_utf8(payload) {
            Ok(text) => self.on_event(topic, text, now),
            Err(_) => {
                warn!(topic, "non-UTF-8 payload dropped");
                Vec::new()
            }
        }
    }

    pub fn on_event(&mut self, topic: &str, payload: &str, now: Duration) -> Vec<Emitted> {
        let mut out = Vec::new();
        for idx in 0..self.rules.rules.len() {
            let rule = &self.rules.rules[idx];
            if !topic_matches(&rule.topic, topic).unwrap_or(false) {
                continue;
            }
            match rule.predicate.matches(payload) {
                Ok(true) => {}
                Ok(false) => continue,
                Err(e) => {
                    warn!(rule = %rule.id, error = %e, "payload does not decode; rule skipped");
                    continue;
                }
            }
            if let (Some(window), Some(last)) = (rule.debounce, self.last_fired.get(&rule.id)) {
                if now.saturating_sub(*last) < window {
                    continue;
                }
            }
            let rule = rule.clone();
            self.fire(&rule, now, &mut out);
        }
        out
    }

    fn fire(&mut self, rule: &Rule, now: Duration, out: &mut Vec<Emitted>) {
        if let Some(confirmation) = &rule.confirmation {
            if let Some(p) = self.pending.get_mut(&rule.id) {
                p.deadline = now + confirmation.timeout;
                return;
            }
        }
        self.last_fired.insert(rule.id.clone(), now);
        self.emit_actions(&rule.id, &rule.actions, now, out);
        if let Some(confirmation) = &rule.confirmation {
            let notification = self.notification(&confirmation.prompt, now, Some(&rule.id));
            self.pending.insert(
                rule.id.clone(),
                PendingConfirmation {
                    rule_id: rule.id.clone(),
                    notif_id: notification.notif_id,
                    deadline: now + confirmation.timeout,
                },
            );
            out.push(Emitted::Notify {
                rule_id: rule.id.clone(),
                notification,
            });
        }
    }

    /// Runs the gated actions if a confirmation for `rule_id` is pending and
    /// `now` is within its deadline. When `notif_id` is given it must name
    /// the prompt that is pending.
    pub fn on_confirm(&mut self, rule_id: &str, notif_id: Option<u64>, now: Duration) -> Vec<Emitted> {
        let Some(pending) = self.pending.get(rule_id) else {
            info!(rule = rule_id, "confirmation with nothing pending ignored");
            return Vec::new();
        };
        if notif_id.is_some_and(|id| id != pending.notif_id) {
            info!(rule = rule_id, ?notif_id, "confirmation for a stale prompt ignored");
            return Vec::new();
        }
        if now > pending.deadline {
            info!(rule = rule_id, "late confirmation ignored");
            self.pending.remove(rule_id);
            return Vec::new();
        }
        self.pending.remove(rule_id);
        let Some(confirmation) = self.rules.get(rule_id).and_then(|r| r.confirmation.clone()) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        self.emit_actions(rule_id, &confirmation.on_confirm, now, &mut out);
        out
    }

    /// Drops and reports confirmations whose deadline has passed.
    pub fn expire_pending(&mut self, now: Duration) -> Vec<String> {
        let expired: Vec<String> = self
            .pending
            .values()
            .filter(|p| now > p.deadline)
            .map(|p| p.rule_id.clone())
            .collect();
        for id in &expired {
            self.pending.remove(id);
        }
        expired
    }

    fn emit_actions(&mut self, rule_id: &str, actions: &[Action], now: Duration, out: &mut Vec<Emitted>) {
        for action in actions {
            out.push(match action {
                Action::Actuate { topic, value } => Emitted::Actuate {
                    rule_id: rule_id.to_owned(),
                    topic: topic.clone(),
                    value: value.clone(),
                },
                Action::Notify(spec) => Emitted::Notify {
                    rule_id: rule_id.to_owned(),
                    notification: self.notification(spec, now, None),
                },
            });
        }
    }

    fn notification(&mut self, spec: &NotifySpec, now: Duration, confirm_rule: Option<&str>) -> Notification {
        let notif_id = self.next_notif_id;
        self.next_notif_id += 1;
        Notification {
            notif_id,
            modality: spec.modality,
            asset_ref: spec.asset.clone(),
            text: spec.text.clone(),
            created_at: now.as_millis() as u64,
            confirm_rule: confirm_rule.map(str::to_owned),
        }
    }
}

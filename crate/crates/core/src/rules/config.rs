//! Rule file format (TOML). Rules fire in file order.
//!
//! ```toml
//! [[rule]]
//! id = "flame_oven_off"
//! topic = "home/kitchen/flame"          # topic filter, wildcards allowed
//! when = { equals = 1 }                 # equals | less_than | greater_than | "any"
//! debounce_s = 5                        # optional
//! actions = [
//!   { actuate = { topic = "home/kitchen/oven_relay/set", value = "0" } },
//!   { notify = { modality = "image3d", asset = "flame_alert" } },
//! ]
//!
//! [rule.confirmation]                   # optional
//! prompt = { modality = "text", asset = "heater", text = "Turn on heater?" }
//! on_confirm = [ { actuate = { topic = "home/tvroom/heater_relay/set", value = "1" } } ]
//! timeout_s = 60
//! ```

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use aal_mqtt::topic::{validate_topic_filter, validate_topic_name};
use serde::Deserialize;
use thiserror::Error;

use super::predicate::{Predicate, PredicateRegistry};
use crate::Modality;

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NotifySpec {
    pub modality: Modality,
    pub asset: String,
    #[serde(default)]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Actuate { topic: String, value: String },
    Notify(NotifySpec),
}

#[derive(Debug, Clone)]
pub struct Confirmation {
    pub prompt: NotifySpec,
    pub on_confirm: Vec<Action>,
    pub timeout: Duration,
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub id: String,
    pub topic: String,
    pub predicate: Arc<dyn Predicate>,
    pub actions: Vec<Action>,
    pub confirmation: Option<Confirmation>,
    pub debounce: Option<Duration>,
}

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("cannot read rules: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse rules: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("duplicate rule id {0:?}")]
    DuplicateId(String),
    #[error("rule {id:?}: {reason}")]
    Invalid { id: String, reason: String },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRules {
    #[serde(default)]
    rule: Vec<RawRule>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    id: String,
    topic: String,
    when: toml::Value,
    #[serde(default)]
    debounce_s: Option<f64>,
    #[serde(default)]
    actions: Vec<Action>,
    #[serde(default)]
    confirmation: Option<RawConfirmation>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfirmation {
    prompt: NotifySpec,
    on_confirm: Vec<Action>,
    timeout_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
}

impl RuleSet {
    pub fn load(path: &Path, registry: &PredicateRegistry) -> Result<RuleSet, RuleError> {
        Self::parse(&std::fs::read_to_string(path)?, registry)
    }

    pub fn parse(text: &str, registry: &PredicateRegistry) -> Result<RuleSet, RuleError> {
        let raw: RawRules = toml::from_str(text)?;
        let mut ids = HashSet::new();
        let mut rules = Vec::with_capacity(raw.rule.len());
        for r in raw.rule {
            if !ids.insert(r.id.clone()) {
                return Err(RuleError::DuplicateId(r.id));
            }
            rules.push(compile(r, registry)?);
        }
        Ok(RuleSet { rules })
    }

    pub fn default_rules() -> RuleSet {
        Self::parse(crate::DEFAULT_RULES, &PredicateRegistry::builtin())
            .expect("shipped rules are valid")
    }

    pub fn get(&self, id: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.id == id)
    }
}

fn compile(r: RawRule, registry: &PredicateRegistry) -> Result<Rule, RuleError> {
    let invalid = |reason: String| RuleError::Invalid {
        id: r.id.clone(),
        reason,
    };
    if r.id.is_empty() {
        return Err(invalid("empty id".into()));
    }
    validate_topic_filter(&r.topic).map_err(|e| invalid(e.to_string()))?;
    let predicate = registry.build(&r.when).map_err(invalid)?;
    let seconds = |what: &str, s: f64| {
        if s.is_finite() && s >= 0.0 {
            Ok(Duration::from_secs_f64(s))
        } else {
            Err(invalid(format!("{what} must be a non-negative number of seconds")))
        }
    };
    let debounce = r.debounce_s.map(|s| seconds("debounce_s", s)).transpose()?;
    check_actions(&r.actions).map_err(&invalid)?;
    let confirmation = match r.confirmation {
        None => None,
        Some(c) => {
            if r.actions.iter().any(|a| matches!(a, Action::Actuate { .. })) {
                return Err(invalid(
                    "a rule with a confirmation may only actuate from on_confirm".into(),
                ));
            }
            check_notify(&c.prompt).map_err(&invalid)?;
            check_actions(&c.on_confirm).map_err(&invalid)?;
            let timeout = seconds("timeout_s", c.timeout_s)?;
            if timeout.is_zero() {
                return Err(invalid("timeout_s must be positive".into()));
            }
            Some(Confirmation {
                prompt: c.prompt,
                on_confirm: c.on_confirm,
                timeout,
            })
        }
    };
    Ok(Rule {
        id: r.id,
        topic: r.topic,
        predicate,
        actions: r.actions,
        confirmation,
        debounce,
    })
}

fn check_actions(actions: &[Action]) -> Result<(), String> {
    for action in actions {
        match action {
            Action::Actuate { topic, .. } => {
                validate_topic_name(topic).map_err(|e| e.to_string())?;
            }
            Action::Notify(n) => check_notify(n)?,
        }
    }
    Ok(())
}

fn check_notify(n: &NotifySpec) -> Result<(), String> {
    if n.asset.is_empty() {
        return Err("notification asset is empty".into());
    }
    if n.modality == Modality::Text && n.text.as_deref().is_none_or(str::is_empty) {
        return Err("text notification needs text".into());
    }
    Ok(())
}

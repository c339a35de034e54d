use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("payload {payload:?} is not {expected}")]
pub struct PayloadError {
    pub payload: String,
    pub expected: &'static str,
}

/// A test over a decoded payload.
pub trait Predicate: Send + Sync + fmt::Debug {
    fn matches(&self, payload: &str) -> Result<bool, PayloadError>;
    fn describe(&self) -> String;
}

/// Builds a predicate from its config argument.
pub trait PredicateFactory: Send + Sync {
    fn name(&self) -> &'static str;
    fn build(&self, arg: Option<&toml::Value>) -> Result<Arc<dyn Predicate>, String>;
}

fn number(payload: &str) -> Result<f64, PayloadError> {
    payload
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| PayloadError {
            payload: payload.to_owned(),
            expected: "a number",
        })
}

fn numeric_arg(name: &str, arg: Option<&toml::Value>) -> Result<f64, String> {
    match arg {
        Some(toml::Value::Integer(i)) => Ok(*i as f64),
        Some(toml::Value::Float(f)) if f.is_finite() => Ok(*f),
        other => Err(format!("{name} needs a number, got {other:?}")),
    }
}

#[derive(Debug)]
struct EqualsNumber(f64);

impl Predicate for EqualsNumber {
    fn matches(&self, payload: &str) -> Result<bool, PayloadError> {
        Ok(number(payload)? == self.0)
    }

    fn describe(&self) -> String {
        format!("equals {}", self.0)
    }
}

#[derive(Debug)]
struct EqualsText(String);

impl Predicate for EqualsText {
    fn matches(&self, payload: &str) -> Result<bool, PayloadError> {
        Ok(payload == self.0)
    }

    fn describe(&self) -> String {
        format!("equals {:?}", self.0)
    }
}

#[derive(Debug)]
struct LessThan(f64);

impl Predicate for LessThan {
    fn matches(&self, payload: &str) -> Result<bool, PayloadError> {
        Ok(number(payload)? < self.0)
    }

    fn describe(&self) -> String {
        format!("less_than {}", self.0)
    }
}

#[derive(Debug)]
struct GreaterThan(f64);

impl Predicate for GreaterThan {
    fn matches(&self, payload: &str) -> Result<bool, PayloadError> {
        Ok(number(payload)? > self.0)
    }

    fn describe(&self) -> String {
        format!("greater_than {}", self.0)
    }
}

#[derive(Debug)]
struct Any;

impl Predicate for Any {
    fn matches(&self, _: &str) -> Result<bool, PayloadError> {
        Ok(true)
    }

    fn describe(&self) -> String {
        "any".into()
    }
}

struct EqualsFactory;

impl PredicateFactory for EqualsFactory {
    fn name(&self) -> &'static str {
        "equals"
    }

    fn build(&self, arg: Option<&toml::Value>) -> Result<Arc<dyn Predicate>, String> {
        match arg {
            Some(toml::Value::String(s)) => Ok(Arc::new(EqualsText(s.clone()))),
            other => Ok(Arc::new(EqualsNumber(numeric_arg("equals", other)?))),
        }
    }
}

struct Threshold {
    name: &'static str,
    make: fn(f64) -> Arc<dyn Predicate>,
}

impl PredicateFactory for Threshold {
    fn name(&self) -> &'static str {
        self.name
    }

    fn build(&self, arg: Option<&toml::Value>) -> Result<Arc<dyn Predicate>, String> {
        Ok((self.make)(numeric_arg(self.name, arg)?))
    }
}

struct AnyFactory;

impl PredicateFactory for AnyFactory {
    fn name(&self) -> &'static str {
        "any"
    }

    fn build(&self, arg: Option<&toml::Value>) -> Result<Arc<dyn Predicate>, String> {
        match arg {
            None | Some(toml::Value::Boolean(true)) => Ok(Arc::new(Any)),
            Some(other) => Err(format!("any takes no argument, got {other}")),
        }
    }
}

#[derive(Clone, Default)]
pub struct PredicateRegistry {
    factories: BTreeMap<&'static str, Arc<dyn PredicateFactory>>,
}

impl PredicateRegistry {
    /// equals, less_than, greater_than, any.
    pub fn builtin() -> Self {
        let mut r = Self::default();
        r.register(Arc::new(EqualsFactory));
        r.register(Arc::new(Threshold {
            name: "less_than",
            make: |v| Arc::new(LessThan(v)),
        }));
        r.register(Arc::new(Threshold {
            name: "greater_than",
            make: |v| Arc::new(GreaterThan(v)),
        }));
        r.register(Arc::new(AnyFactory));
        r
    }

    pub fn register(&mut self, factory: Arc<dyn PredicateFactory>) {
        self.factories.insert(factory.name(), factory);
    }

    /// Accepts `"any"` or a single-key table such as `{ less_than = 18.0 }`.
    pub fn build(&self, spec: &toml::Value) -> Result<Arc<dyn Predicate>, String> {
        let (name, arg) = match spec {
            toml::Value::String(name) => (name.as_str(), None),
            toml::Value::Table(t) if t.len() == 1 => {
                let (k, v) = t.iter().next().unwrap();
                (k.as_str(), Some(v))
            }
            other => return Err(format!("malformed predicate {other}")),
        };
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| format!("unknown predicate {name:?}"))?;
        factory.build(arg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(src: &str) -> Result<Arc<dyn Predicate>, String> {
        let value: toml::Value = toml::from_str(&format!("p = {src}")).unwrap();
        PredicateRegistry::builtin().build(&value["p"])
    }

    #[test]
    fn numeric_equals_accepts_device_encodings() {
        let p = build("{ equals = 1 }").unwrap();
        assert!(p.matches("1").unwrap());
        assert!(p.matches("1.0").unwrap());
        assert!(!p.matches("0").unwrap());
        assert!(p.matches("on").is_err());
    }

    #[test]
    fn text_equals_is_exact() {
        let p = build("{ equals = \"detected\" }").unwrap();
        assert!(p.matches("detected").unwrap());
        assert!(!p.matches("Detected").unwrap());
    }

    #[test]
    fn thresholds_are_strict() {
        let lt = build("{ less_than = 18.0 }").unwrap();
        assert!(lt.matches("15.0").unwrap());
        assert!(lt.matches("17.9").unwrap());
        assert!(!lt.matches("18.0").unwrap());
        assert!(lt.matches("NaN").is_err());
        let gt = build("{ greater_than = 30 }").unwrap();
        assert!(gt.matches("30.5").unwrap());
        assert!(!gt.matches("30").unwrap());
    }

    #[test]
    fn any_and_errors() {
        assert!(build("\"any\"").unwrap().matches("whatever").unwrap());
        assert!(build("{ sometimes = 1 }").is_err());
        assert!(build("{ less_than = \"cold\" }").is_err());
        assert!(build("{ equals = 1, less_than = 2 }").is_err());
        assert!(build("3").is_err());
    }
}

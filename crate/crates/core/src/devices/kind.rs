use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub const MIN_CELSIUS: f64 = -40.0;
pub const MAX_CELSIUS: f64 = 85.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reading {
    Bool(bool),
    Celsius(f64),
}

impl Reading {
    /// Wire form: `"0"`/`"1"` or a one-decimal temperature.
    pub fn encode(&self) -> String {
        match self {
            Reading::Bool(b) => if *b { "1" } else { "0" }.to_owned(),
            Reading::Celsius(c) => format!("{c:.1}"),
        }
    }
}

impl fmt::Display for Reading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ValueError {
    #[error("{kind} expects \"0\" or \"1\", got {raw:?}")]
    NotBoolean { kind: &'static str, raw: String },
    #[error("{raw:?} is not a temperature")]
    NotNumber { raw: String },
    #[error("{value} °C is outside [{MIN_CELSIUS}, {MAX_CELSIUS}]")]
    OutOfRange { value: f64 },
}

/// Behaviour of one class of device. New kinds plug in through
/// [`KindRegistry::register`].
pub trait DeviceKind: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn is_actuator(&self) -> bool;
    fn parse(&self, raw: &str) -> Result<Reading, ValueError>;
    fn default_reading(&self) -> Reading;
}

#[derive(Debug)]
pub struct Binary {
    name: &'static str,
    actuator: bool,
}

impl Binary {
    pub const fn sensor(name: &'static str) -> Self {
        Binary {
            name,
            actuator: false,
        }
    }

    pub const fn actuator(name: &'static str) -> Self {
        Binary {
            name,
            actuator: true,
        }
    }
}

impl DeviceKind for Binary {
    fn name(&self) -> &'static str {
        self.name
    }

    fn is_actuator(&self) -> bool {
        self.actuator
    }

    fn parse(&self, raw: &str) -> Result<Reading, ValueError> {
        match raw.trim() {
            "0" => Ok(Reading::Bool(false)),
            "1" => Ok(Reading::Bool(true)),
            _ => Err(ValueError::NotBoolean {
                kind: self.name,
                raw: raw.to_owned(),
            }),
        }
    }

    fn default_reading(&self) -> Reading {
        Reading::Bool(false)
    }
}

#[derive(Debug)]
pub struct Temperature;

impl DeviceKind for Temperature {
    fn name(&self) -> &'static str {
        "temperature"
    }

    fn is_actuator(&self) -> bool {
        false
    }

    fn parse(&self, raw: &str) -> Result<Reading, ValueError> {
        let value: f64 = raw.trim().parse().map_err(|_| ValueError::NotNumber {
            raw: raw.to_owned(),
        })?;
        if !value.is_finite() {
            return Err(ValueError::NotNumber {
                raw: raw.to_owned(),
            });
        }
        if !(MIN_CELSIUS..=MAX_CELSIUS).contains(&value) {
            return Err(ValueError::OutOfRange { value });
        }
        Ok(Reading::Celsius(value))
    }

    fn default_reading(&self) -> Reading {
        Reading::Celsius(21.0)
    }
}

/// Kind name (or alias) to implementation.
#[derive(Debug, Clone, Default)]
pub struct KindRegistry {
    kinds: BTreeMap<String, Arc<dyn DeviceKind>>,
}

impl KindRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// rain, flame, temperature, pir, relay, led; `gas` is an alias of flame.
    pub fn builtin() -> Self {
        let mut registry = Self::empty();
        registry.register(Arc::new(Binary::sensor("rain")));
        registry.register(Arc::new(Binary::sensor("flame")));
        registry.register(Arc::new(Temperature));
        registry.register(Arc::new(Binary::sensor("pir")));
        registry.register(Arc::new(Binary::actuator("relay")));
        registry.register(Arc::new(Binary::actuator("led")));
        registry.alias("gas", "flame");
        registry
    }

    pub fn register(&mut self, kind: Arc<dyn DeviceKind>) {
        self.kinds.insert(kind.name().to_owned(), kind);
    }

    /// Panics if `target` is not registered.
    pub fn alias(&mut self, alias: &str, target: &str) {
        let kind = self.kinds[target].clone();
        self.kinds.insert(alias.to_owned(), kind);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn DeviceKind>> {
        self.kinds.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.kinds.keys().map(String::as_str)
    }
}

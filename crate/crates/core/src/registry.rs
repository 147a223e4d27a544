//! Name-keyed registries of interchangeable strategies.

use crate::error::{Error, Result};

/// Factories registered under unique names, looked up at runtime from
/// configuration strings.
#[derive(Clone)]
pub struct Registry<F> {
    kind: &'static str,
    entries: Vec<(&'static str, F)>,
}

impl<F> Registry<F> {
    pub fn new(kind: &'static str) -> Self {
        Registry { kind, entries: Vec::new() }
    }

    pub fn register(&mut self, name: &'static str, factory: F) -> Result<()> {
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::invalid(format!("{} `{name}` registered twice", self.kind)));
        }
        self.entries.push((name, factory));
        Ok(())
    }

    pub fn with(mut self, name: &'static str, factory: F) -> Self {
        self.register(name, factory).expect("unique built-in names");
        self
    }

    pub fn get(&self, name: &str) -> Result<&F> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, f)| f).ok_or_else(|| {
            Error::invalid(format!("unknown {} `{name}` (available: {})", self.kind, self.names().join(", ")))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }
}

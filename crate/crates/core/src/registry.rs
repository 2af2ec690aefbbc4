//! Name-keyed registries of interchangeable strategies.
//!
//! Every pluggable family in the pipeline (encoder backends, keyword
//! extractors, captioners, dataset adapters) is a trait object built by a
//! factory registered under a stable name. Configuration selects the
//! strategy by that name at runtime.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

type Factory<C, T> = Box<dyn Fn(&C) -> Result<Box<T>> + Send + Sync>;

/// A map from strategy name to a factory producing `T` from a context `C`.
pub struct Registry<C: ?Sized, T: ?Sized> {
    kind: &'static str,
    factories: BTreeMap<String, Factory<C, T>>,
}

impl<C: ?Sized, T: ?Sized> Registry<C, T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            factories: BTreeMap::new(),
        }
    }

    /// Registers `factory` under `name`, replacing any previous entry.
    pub fn register<F>(&mut self, name: &str, factory: F) -> &mut Self
    where
        F: Fn(&C) -> Result<Box<T>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    /// Registered names in lexicographic order.
    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(&self, name: &str, ctx: &C) -> Result<Box<T>> {
        match self.factories.get(name) {
            Some(factory) => factory(ctx),
            None => Err(Error::Config(format!(
                "unknown {} {name:?} (available: {})",
                self.kind,
                self.names().join(", ")
            ))),
        }
    }
}

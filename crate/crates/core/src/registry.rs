//! Name-keyed registry of interchangeable strategy objects.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Result, XitError};

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Arc<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Registers `item` under `name`; names are unique.
    pub fn register(&mut self, name: &str, item: Arc<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(XitError::invalid(format!(
                "{} `{name}` is already registered",
                self.kind
            )));
        }
        self.entries.insert(name.to_string(), item);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| XitError::UnknownName {
                kind: self.kind,
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

type Factory<A, T> = Box<dyn Fn(&A) -> Result<Box<T>> + Send + Sync>;

/// Named constructors for one family of trait objects.
pub struct Registry<A, T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Factory<A, T>>,
}

impl<A, T: ?Sized> Registry<A, T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, name: impl Into<String>, factory: F)
    where
        F: Fn(&A) -> Result<Box<T>> + Send + Sync + 'static,
    {
        self.entries.insert(name.into(), Box::new(factory));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, args: &A) -> Result<Box<T>> {
        match self.entries.get(name) {
            Some(f) => f(args),
            None => Err(Error::UnknownName {
                kind: self.kind,
                name: name.to_string(),
                known: self.names().collect::<Vec<_>>().join(", "),
            }),
        }
    }
}

impl<A, T: ?Sized> fmt::Debug for Registry<A, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("names", &self.names().collect::<Vec<_>>())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Shape {
        fn area(&self) -> f64;
    }

    struct Square(f64);

    impl Shape for Square {
        fn area(&self) -> f64 {
            self.0 * self.0
        }
    }

    #[test]
    fn builds_registered_and_rejects_unknown() {
        let mut r: Registry<f64, dyn Shape> = Registry::new("shape");
        r.register("square", |side: &f64| Ok(Box::new(Square(*side)) as Box<dyn Shape>));
        assert_eq!(r.build("square", &3.0).unwrap().area(), 9.0);
        match r.build("circle", &1.0) {
            Err(Error::UnknownName { kind, known, .. }) => {
                assert_eq!(kind, "shape");
                assert_eq!(known, "square");
            }
            _ => panic!("expected unknown-name error"),
        }
    }
}

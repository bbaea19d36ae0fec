//! Trainable parameters and a visitor over named parameter trees.

use crate::var::{Array, Var};

/// A named weight array wrapped as a graph leaf.
#[derive(Clone, Debug)]
pub struct Param {
    var: Var,
}

impl Param {
    pub fn new(value: Array, trainable: bool) -> Param {
        Param { var: Var::leaf(value, trainable) }
    }

    /// The current value as a graph leaf.
    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn value(&self) -> &Array {
        self.var.value()
    }

    pub fn trainable(&self) -> bool {
        self.var.requires_grad()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        if trainable != self.trainable() {
            self.var = Var::leaf(self.value().clone(), trainable);
        }
    }

    /// Replaces the value, keeping the trainable flag. Graphs built from the
    /// previous value are unaffected.
    pub fn set_value(&mut self, value: Array) {
        assert_eq!(value.shape(), self.value().shape(), "parameter shape changed");
        self.var = Var::leaf(value, self.trainable());
    }
}

/// Anything holding parameters.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p.clone())));
        out
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut("", &mut |_, p| p.set_trainable(trainable));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value().len());
        n
    }
}

/// Joins a prefix and a field name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl Module for Param {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(prefix, self)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(prefix, self)
    }
}

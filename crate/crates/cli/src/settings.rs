//! Resolved settings annotated with the layer each value came from:
//! command-line flag, then config file, then built-in default.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Flag,
    File,
    Default,
}

impl Source {
    fn as_str(self) -> &'static str {
        match self {
            Self::Flag => "flag",
            Self::File => "file",
            Self::Default => "default",
        }
    }
}

#[derive(Debug, Default)]
pub struct Provenance {
    file: Option<toml::Table>,
    file_label: &'static str,
    flags: BTreeSet<String>,
}

impl Provenance {
    /// `file` holds the keys the user wrote, `label` names that layer.
    pub fn new(file: Option<toml::Table>, label: &'static str) -> Self {
        Self {
            file,
            file_label: label,
            flags: BTreeSet::new(),
        }
    }

    /// Mark a dotted key, or a whole table, as set on the command line.
    pub fn flag(&mut self, key: impl Into<String>) {
        self.flags.insert(key.into());
    }

    pub fn source(&self, key: &str) -> Source {
        let flagged = self.flags.iter().any(|f| {
            key == f
                || key
                    .strip_prefix(f.as_str())
                    .is_some_and(|rest| rest.starts_with('.'))
        });
        if flagged {
            return Source::Flag;
        }
        let mut node = self.file.as_ref().map(|t| toml::Value::Table(t.clone()));
        for part in key.split('.') {
            node = node.and_then(|n| n.get(part).cloned());
        }
        if node.is_some() {
            Source::File
        } else {
            Source::Default
        }
    }

    /// One `key = value (source)` line per leaf of `resolved`.
    pub fn report(&self, resolved: &impl Serialize) -> String {
        let table = toml::Table::try_from(resolved).expect("settings serialize to a table");
        let mut leaves = Vec::new();
        flatten("", &toml::Value::Table(table), &mut leaves);
        let mut out = String::new();
        for (key, value) in leaves {
            let source = match self.source(&key) {
                Source::File => self.file_label,
                s => s.as_str(),
            };
            let _ = writeln!(out, "  {key} = {value} ({source})");
        }
        out
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.to_string())),
    }
}

/// Keys whose values differ between two serializable configurations.
pub fn differences(a: &impl Serialize, b: &impl Serialize) -> Vec<String> {
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    flatten(
        "",
        &toml::Value::Table(toml::Table::try_from(a).expect("serializes")),
        &mut la,
    );
    flatten(
        "",
        &toml::Value::Table(toml::Table::try_from(b).expect("serializes")),
        &mut lb,
    );
    la.iter()
        .zip(&lb)
        .filter(|(x, y)| x != y)
        .map(|((k, x), (_, y))| format!("{k}: {x} vs {y}"))
        .collect()
}

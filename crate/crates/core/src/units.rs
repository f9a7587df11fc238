//! Unit symbols, aliases and affine conversion rules.
//!
//! Every conversion is `canonical = raw * scale + offset`. Rules compose, so a
//! table holding `F -> C` and `C -> K` can also convert `F -> K`.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnitError {
    #[error("unit rule {from} -> {to} has zero scale")]
    ZeroScale { from: String, to: String },
    #[error("duplicate unit rule {from} -> {to}")]
    DuplicateRule { from: String, to: String },
    #[error("non-finite transform in unit rule {from} -> {to}")]
    NonFinite { from: String, to: String },
    #[error("cannot read unit rules: {0}")]
    Io(String),
    #[error("malformed unit rules: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub scale: f64,
    pub offset: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        scale: 1.0,
        offset: 0.0,
    };

    pub fn apply(&self, x: f64) -> f64 {
        x * self.scale + self.offset
    }

    /// `other` after `self`.
    pub fn then(&self, other: &Affine) -> Affine {
        Affine {
            scale: self.scale * other.scale,
            offset: self.offset * other.scale + other.offset,
        }
    }

    pub fn inverse(&self) -> Affine {
        Affine {
            scale: 1.0 / self.scale,
            offset: -self.offset / self.scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRule {
    pub from_unit: String,
    pub to_unit: String,
    pub scale: f64,
    pub offset: f64,
}

impl UnitRule {
    pub fn new(from: &str, to: &str, scale: f64, offset: f64) -> Self {
        Self {
            from_unit: from.to_string(),
            to_unit: to.to_string(),
            scale,
            offset,
        }
    }

    pub fn transform(&self) -> Affine {
        Affine {
            scale: self.scale,
            offset: self.offset,
        }
    }
}

/// Spellings that map onto a canonical symbol. Lookup is case-sensitive first,
/// then falls back to a lowercase match so "mL" and "ml" both resolve.
const ALIASES: &[(&str, &str)] = &[
    ("°C", "C"),
    ("° C", "C"),
    ("ºC", "C"),
    ("℃", "C"),
    ("degC", "C"),
    ("deg C", "C"),
    ("celsius", "C"),
    ("C", "C"),
    ("°F", "F"),
    ("° F", "F"),
    ("ºF", "F"),
    ("℉", "F"),
    ("degF", "F"),
    ("deg F", "F"),
    ("fahrenheit", "F"),
    ("F", "F"),
    ("K", "K"),
    ("kelvin", "K"),
    ("%", "%"),
    ("percent", "%"),
    ("% RH", "%"),
    ("%RH", "%"),
    ("RH", "%"),
    ("mL", "mL"),
    ("ml", "mL"),
    ("L", "L"),
    ("l", "L"),
    ("liter", "L"),
    ("litre", "L"),
    ("µL", "uL"),
    ("μL", "uL"),
    ("uL", "uL"),
    ("ul", "uL"),
    ("s", "s"),
    ("sec", "s"),
    ("second", "s"),
    ("seconds", "s"),
    ("min", "min"),
    ("mins", "min"),
    ("minute", "min"),
    ("minutes", "min"),
    ("h", "h"),
    ("hr", "h"),
    ("hrs", "h"),
    ("hour", "h"),
    ("hours", "h"),
    ("d", "d"),
    ("day", "d"),
    ("days", "d"),
    ("mg/L", "mg/L"),
    ("ppm", "mg/L"),
    ("mJ/cm2", "mJ/cm2"),
    ("mJ/cm^2", "mJ/cm2"),
    ("mJ/cm²", "mJ/cm2"),
    ("J/m2", "J/m2"),
    ("J/m^2", "J/m2"),
    ("J/m²", "J/m2"),
];

/// Resolve a unit spelling to its canonical symbol. Unknown spellings are
/// returned trimmed but otherwise untouched.
pub fn canonical_symbol(raw: &str) -> String {
    let t = raw.trim();
    if let Some((_, c)) = ALIASES.iter().find(|(a, _)| *a == t) {
        return (*c).to_string();
    }
    let lower = t.to_lowercase();
    if let Some((_, c)) = ALIASES.iter().find(|(a, _)| a.to_lowercase() == lower) {
        return (*c).to_string();
    }
    t.to_string()
}

pub fn is_known_symbol(raw: &str) -> bool {
    let t = raw.trim();
    ALIASES
        .iter()
        .any(|(a, _)| *a == t || a.to_lowercase() == t.to_lowercase())
}

/// Conversion table. Rules are directed; `convert` searches compositions.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitTable {
    rules: BTreeMap<(String, String), Affine>,
}

impl Default for UnitTable {
    fn default() -> Self {
        Self::builtin()
    }
}

impl UnitTable {
    pub fn empty() -> Self {
        Self {
            rules: BTreeMap::new(),
        }
    }

    /// Temperature, volume, time, dose and concentration rules, each with its
    /// inverse.
    pub fn builtin() -> Self {
        let mut t = Self::empty();
        let pairs = [
            UnitRule::new("F", "C", 5.0 / 9.0, -160.0 / 9.0),
            UnitRule::new("K", "C", 1.0, -273.15),
            UnitRule::new("mL", "L", 1e-3, 0.0),
            UnitRule::new("uL", "mL", 1e-3, 0.0),
            UnitRule::new("s", "min", 1.0 / 60.0, 0.0),
            UnitRule::new("min", "h", 1.0 / 60.0, 0.0),
            UnitRule::new("h", "d", 1.0 / 24.0, 0.0),
            UnitRule::new("J/m2", "mJ/cm2", 0.1, 0.0),
        ];
        for r in pairs {
            let inv = r.transform().inverse();
            t.rules
                .insert((r.from_unit.clone(), r.to_unit.clone()), r.transform());
            t.rules.insert((r.to_unit, r.from_unit), inv);
        }
        // The forward F -> C rule is stated exactly; keep the inverse exact too.
        t.rules.insert(
            ("C".into(), "F".into()),
            Affine {
                scale: 9.0 / 5.0,
                offset: 32.0,
            },
        );
        t
    }

    pub fn from_rules(rules: Vec<UnitRule>) -> Result<Self, UnitError> {
        let mut t = Self::empty();
        for r in rules {
            t.add(r)?;
        }
        Ok(t)
    }

    /// Builtins overlaid with user rules. A user rule replaces a builtin for the
    /// same pair; two user rules for one pair are rejected.
    pub fn builtin_with(rules: Vec<UnitRule>) -> Result<Self, UnitError> {
        let user = Self::from_rules(rules)?;
        let mut t = Self::builtin();
        t.rules.extend(user.rules);
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, UnitError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UnitError::Io(format!("{}: {e}", path.display())))?;
        let rules: Vec<UnitRule> =
            serde_json::from_str(&text).map_err(|e| UnitError::Malformed(e.to_string()))?;
        Self::builtin_with(rules)
    }

    pub fn add(&mut self, rule: UnitRule) -> Result<(), UnitError> {
        let from = canonical_symbol(&rule.from_unit);
        let to = canonical_symbol(&rule.to_unit);
        if rule.scale == 0.0 {
            return Err(UnitError::ZeroScale { from, to });
        }
        if !rule.scale.is_finite() || !rule.offset.is_finite() {
            return Err(UnitError::NonFinite { from, to });
        }
        let key = (from.clone(), to.clone());
        if self.rules.contains_key(&key) {
            return Err(UnitError::DuplicateRule { from, to });
        }
        self.rules.insert(key, rule.transform());
        Ok(())
    }

    pub fn rules(&self) -> Vec<UnitRule> {
        self.rules
            .iter()
            .map(|((f, t), a)| UnitRule::new(f, t, a.scale, a.offset))
            .collect()
    }

    /// Shortest rule chain from `from` to `to` (BFS in lexicographic rule
    /// order, so the chosen path is deterministic).
    pub fn path(&self, from: &str, to: &str) -> Option<Affine> {
        let from = canonical_symbol(from);
        let to = canonical_symbol(to);
        if from == to {
            return Some(Affine::IDENTITY);
        }
        let mut seen = HashSet::new();
        let mut queue = VecDeque::new();
        seen.insert(from.clone());
        queue.push_back((from, Affine::IDENTITY));
        while let Some((unit, acc)) = queue.pop_front() {
            for ((f, t), a) in self.rules.range((unit.clone(), String::new())..) {
                if *f != unit {
                    break;
                }
                let next = acc.then(a);
                if *t == to {
                    return Some(next);
                }
                if seen.insert(t.clone()) {
                    queue.push_back((t.clone(), next));
                }
            }
        }
        None
    }

    pub fn convert(&self, value: f64, from: &str, to: &str) -> Option<f64> {
        self.path(from, to).map(|a| a.apply(value))
    }

    pub fn compatible(&self, from: &str, to: &str) -> bool {
        self.path(from, to).is_some()
    }
}

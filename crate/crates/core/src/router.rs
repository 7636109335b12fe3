//! Rule-based prompt routing over the nine prompt categories.
//!
//! Rules are case-insensitive substring patterns with unique priorities; the
//! highest-priority matching rule decides the category and unmatched prompts
//! fall back to [`CategoryId::DEFAULT`].
//!
//! Rule files are line oriented:
//!
//! ```text
//! # priority  category  pattern (rest of the line)
//! 100         2         who wrote
//! 40          5         how many
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CATEGORIES: usize = 9;

const NAMES: [&str; NUM_CATEGORIES] = [
    "Object identification",
    "Attribute / breed identification",
    "Text / symbol recognition",
    "Scene understanding",
    "Spatial relations",
    "Counting",
    "Action / interaction",
    "Intention / function",
    "Default",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct CategoryId(u8);

impl CategoryId {
    pub const DEFAULT: CategoryId = CategoryId(8);

    pub fn new(id: u32) -> Result<Self> {
        if (id as usize) < NUM_CATEGORIES {
            Ok(CategoryId(id as u8))
        } else {
            Err(Error::InvalidCategory(id))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn name(self) -> &'static str {
        NAMES[self.index()]
    }

    pub fn all() -> impl Iterator<Item = CategoryId> {
        (0..NUM_CATEGORIES as u8).map(CategoryId)
    }
}

impl TryFrom<u32> for CategoryId {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        CategoryId::new(v)
    }
}

impl From<CategoryId> for u32 {
    fn from(c: CategoryId) -> u32 {
        u32::from(c.0)
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rule {
    pattern: String,
    pub category: CategoryId,
    pub priority: i64,
}

impl Rule {
    pub fn new(pattern: &str, category: CategoryId, priority: i64) -> Result<Self> {
        let pattern = normalize_text(pattern);
        if pattern.is_empty() {
            return Err(Error::EmptyPattern);
        }
        Ok(Rule { pattern, category, priority })
    }

    /// Pattern after case-folding and whitespace normalization.
    pub fn pattern(&self) -> &str {
        &self.pattern
    }
}

/// Rules ordered by descending priority.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RuleTable {
    rules: Vec<Rule>,
}

impl RuleTable {
    pub fn new(mut rules: Vec<Rule>) -> Result<Self> {
        rules.sort_by_key(|r| core::cmp::Reverse(r.priority));
        if let Some(w) = rules.windows(2).find(|w| w[0].priority == w[1].priority) {
            return Err(Error::DuplicatePriority(w[0].priority));
        }
        Ok(RuleTable { rules })
    }

    pub fn fallback(&self) -> CategoryId {
        CategoryId::DEFAULT
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// ASCII case-folding plus collapsing of whitespace runs to single spaces.
pub fn normalize_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().map(|c| c.to_ascii_lowercase()));
    }
    out
}

pub fn route(prompt: &str, rules: &RuleTable) -> CategoryId {
    let text = normalize_text(prompt);
    if text.is_empty() {
        return rules.fallback();
    }
    rules
        .rules
        .iter()
        .find(|r| text.contains(r.pattern.as_str()))
        .map_or(rules.fallback(), |r| r.category)
}

/// Parses the line-oriented rule format described in the module docs.
pub fn load_rules(config: &str) -> Result<RuleTable> {
    let mut rules = Vec::new();
    for (i, raw) in config.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |reason: &str| Error::RuleParse { line: line_no, reason: reason.to_string() };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let priority: i64 = fields[0]
            .parse()
            .map_err(|_| parse_err("priority must be an integer"))?;
        let category = fields
            .get(1)
            .ok_or_else(|| parse_err("missing category"))?
            .parse::<u32>()
            .map_err(|_| parse_err("category must be an integer"))?;
        let category = CategoryId::new(category).map_err(|_| parse_err("category outside 0..=8"))?;
        let pattern = fields[2..].join(" ");
        if pattern.is_empty() {
            return Err(parse_err("missing pattern"));
        }
        rules.push(Rule::new(&pattern, category, priority).map_err(|_| parse_err("empty pattern"))?);
    }
    RuleTable::new(rules)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn cat(i: u32) -> CategoryId {
        CategoryId::new(i).unwrap()
    }

    #[test]
    fn empty_rules_fall_back() {
        let t = load_rules("# nothing here\n\n").unwrap();
        assert!(t.is_empty());
        assert_eq!(route("count the birds", &t), CategoryId::DEFAULT);
        assert_eq!(route("", &t), CategoryId::DEFAULT);
        assert_eq!(route("   \t ", &t), CategoryId::DEFAULT);
    }

    #[test]
    fn single_rule_matches() {
        let t = load_rules("10 5 count").unwrap();
        assert_eq!(route("count the birds", &t), cat(5));
        assert_eq!(route("COUNT   the birds", &t), cat(5));
        assert_eq!(route("name the birds", &t), CategoryId::DEFAULT);
    }

    #[test]
    fn duplicate_priorities_rejected() {
        assert_eq!(load_rules("10 5 count\n10 2 read"), Err(Error::DuplicatePriority(10)));
    }

    #[test]
    fn parse_errors_carry_line() {
        assert!(matches!(load_rules("10 5 a\nx 1 b"), Err(Error::RuleParse { line: 2, .. })));
        assert!(matches!(load_rules("10 9 a"), Err(Error::RuleParse { line: 1, .. })));
        assert!(matches!(load_rules("10 3"), Err(Error::RuleParse { line: 1, .. })));
    }

    #[test]
    fn padded_columns_parse() {
        let t = load_rules("  100\t 2    who   wrote  ").unwrap();
        assert_eq!(t.rules()[0].pattern(), "who wrote");
        assert_eq!(route("Who wrote this book?", &t), cat(2));
    }

    #[test]
    fn highest_priority_wins() {
        let t = RuleTable::new(vec![
            Rule::new("how many", cat(5), 10).unwrap(),
            Rule::new("people", cat(6), 20).unwrap(),
        ])
        .unwrap();
        assert_eq!(route("How many people are there?", &t), cat(6));
    }

    proptest! {
        #[test]
        fn routing_ignores_rule_order(
            prompt in "[a-c ]{0,12}",
            pats in proptest::collection::vec(("[a-c]{1,3}", 0u32..9), 1..6),
            seed in any::<u64>(),
        ) {
            let rules: Vec<Rule> = pats.iter().enumerate()
                .map(|(i, (p, c))| Rule::new(p, cat(*c), i as i64).unwrap())
                .collect();
            let mut shuffled = rules.clone();
            // deterministic rotation as the permutation
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let a = RuleTable::new(rules).unwrap();
            let b = RuleTable::new(shuffled).unwrap();
            let ra = route(&prompt, &a);
            prop_assert_eq!(ra, route(&prompt, &b));
            prop_assert_eq!(ra, route(&prompt, &a));
            prop_assert!(ra.index() < NUM_CATEGORIES);
        }
    }
}

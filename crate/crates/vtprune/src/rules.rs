use std::fs;
use std::path::Path;

use vtprune_core::{load_rules, route, CategoryId, RuleTable};

use crate::error::{Error, Result};

pub const DEFAULT_RULES: &str = include_str!("../data/rules.txt");

pub fn default_rules() -> RuleTable {
    load_rules(DEFAULT_RULES).expect("shipped rule file parses")
}

pub fn load_rules_file(path: &Path) -> Result<RuleTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_rules(&text).map_err(|e| Error::ConfigParse { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn resolve_rules(path: Option<&Path>) -> Result<RuleTable> {
    path.map_or_else(|| Ok(default_rules()), load_rules_file)
}

/// Where a sample's category came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategorySource {
    Flag,
    Manifest,
    Router,
}

/// Flag, then manifest label, then the router.
pub fn resolve_category(
    flag: Option<CategoryId>,
    manifest: Option<CategoryId>,
    prompt: &str,
    rules: &RuleTable,
) -> (CategoryId, CategorySource) {
    match (flag, manifest) {
        (Some(c), _) => (c, CategorySource::Flag),
        (None, Some(c)) => (c, CategorySource::Manifest),
        (None, None) => (route(prompt, rules), CategorySource::Router),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat(i: u32) -> CategoryId {
        CategoryId::new(i).unwrap()
    }

    #[test]
    fn shipped_rules_route_examples() {
        let t = default_rules();
        assert_eq!(route("Who wrote this book?", &t), cat(2));
        assert_eq!(route("", &t), CategoryId::DEFAULT);
        assert_eq!(route("How many apples are on the table?", &t), cat(5));
        assert_eq!(route("What breed is the dog?", &t), cat(1));
        assert_eq!(route("What is the man on the left of the car doing?", &t), cat(4));
        assert_eq!(route("Describe the picture.", &t), CategoryId::DEFAULT);
    }

    #[test]
    fn every_category_is_reachable() {
        let t = default_rules();
        let mut seen = [false; 9];
        for r in t.rules() {
            seen[r.category.index()] = true;
        }
        assert!(seen[..8].iter().all(|&s| s));
    }

    #[test]
    fn precedence() {
        let t = default_rules();
        let p = "how many birds";
        assert_eq!(resolve_category(Some(cat(1)), Some(cat(3)), p, &t), (cat(1), CategorySource::Flag));
        assert_eq!(resolve_category(None, Some(cat(3)), p, &t), (cat(3), CategorySource::Manifest));
        assert_eq!(resolve_category(None, None, p, &t), (cat(5), CategorySource::Router));
    }
}

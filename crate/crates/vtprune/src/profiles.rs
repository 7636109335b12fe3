//! TOML profile tables and calibration candidate spaces.
//!
//! ```toml
//! model = "llava"
//!
//! [[profile]]
//! category = 0
//! mode = "weights"            # or "scores" with an optional tau
//! split_ratio = 0.8
//! weights = { "5" = 0.2, "15" = 0.3, "22" = 0.5 }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vtprune_core::calibration::{CandidateLayerSet, CandidateSpace};
use vtprune_core::{CategoryId, ClassProfile, ProfileMode, ProfileTable};

use crate::error::{Error, Result};

/// Environment variable naming the default profile table (a file path or a
/// built-in name).
pub const PROFILES_ENV: &str = "VTPRUNE_PROFILES";

pub const DEFAULT_BUILTIN: &str = "llava";

pub const BUILTINS: [(&str, &str); 2] = [
    ("llava", include_str!("../data/llava.toml")),
    ("qwen25vl", include_str!("../data/qwen25vl.toml")),
];

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    profile: Vec<ProfileEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileEntry {
    category: u32,
    mode: ModeName,
    split_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ModeName {
    Weights,
    Scores,
}

fn layer_keys(map: BTreeMap<String, f64>) -> std::result::Result<BTreeMap<u32, f64>, String> {
    map.into_iter()
        .map(|(k, v)| {
            let id = k.trim_start_matches('L').parse::<u32>().map_err(|_| format!("bad layer key {k:?}"))?;
            Ok((id, v))
        })
        .collect()
}

impl ProfileEntry {
    fn into_profile(self) -> std::result::Result<ClassProfile, String> {
        let category = CategoryId::new(self.category).map_err(|e| e.to_string())?;
        let mode = match (self.mode, self.weights, self.scores) {
            (ModeName::Weights, Some(w), None) => {
                if self.tau.is_some() {
                    return Err(format!("category {category}: tau only applies to scores mode"));
                }
                ProfileMode::Weights { weights: layer_keys(w)? }
            }
            (ModeName::Scores, None, Some(s)) => ProfileMode::Scores {
                scores: layer_keys(s)?,
                tau: self.tau.unwrap_or(vtprune_core::fusion::DEFAULT_TEMPERATURE),
            },
            _ => return Err(format!("category {category}: give exactly the table matching mode")),
        };
        let p = ClassProfile { category, mode, split_ratio: self.split_ratio };
        p.validate().map_err(|e| e.to_string())?;
        Ok(p)
    }

    fn from_profile(p: &ClassProfile) -> Self {
        let keyed = |m: &BTreeMap<u32, f64>| m.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let (mode, weights, scores, tau) = match &p.mode {
            ProfileMode::Weights { weights } => (ModeName::Weights, Some(keyed(weights)), None, None),
            ProfileMode::Scores { scores, tau } => (ModeName::Scores, None, Some(keyed(scores)), Some(*tau)),
        };
        ProfileEntry { category: u32::from(p.category.get()), mode, split_ratio: p.split_ratio, weights, scores, tau }
    }
}

pub fn parse_profiles(text: &str, origin: &Path) -> Result<ProfileTable> {
    let err = |reason: String| Error::ConfigParse { path: origin.to_path_buf(), reason };
    let file: ProfileFile = toml::from_str(text).map_err(|e| err(e.to_string()))?;
    let profiles = file
        .profile
        .into_iter()
        .map(ProfileEntry::into_profile)
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(err)?;
    ProfileTable::new(profiles).map_err(|e| err(e.to_string()))
}

pub fn profiles_to_toml(table: &ProfileTable, model: Option<&str>) -> String {
    let file = ProfileFile {
        model: model.map(str::to_string),
        profile: table.profiles().iter().map(ProfileEntry::from_profile).collect(),
    };
    toml::to_string(&file).expect("profile table serializes")
}

pub fn builtin(name: &str) -> Option<ProfileTable> {
    BUILTINS.iter().find(|(n, _)| *n == name).map(|(n, text)| {
        parse_profiles(text, Path::new(n)).expect("shipped profile tables are valid")
    })
}

/// A built-in name or a file path; `None` falls back to [`PROFILES_ENV`]
/// and then to [`DEFAULT_BUILTIN`].
pub fn resolve_profiles(source: Option<&str>) -> Result<ProfileTable> {
    let env = std::env::var(PROFILES_ENV).ok().filter(|s| !s.is_empty());
    let source = source.map(str::to_string).or(env).unwrap_or_else(|| DEFAULT_BUILTIN.to_string());
    if let Some(t) = builtin(&source) {
        return Ok(t);
    }
    let path = Path::new(&source);
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_profiles(&text, path)
}

/// Candidate space file:
///
/// ```toml
/// ratios = [0.2, 0.4, 0.6, 0.8]
///
/// [[layer_set]]
/// layers = [5, 22]                  # uniform weights
///
/// [[layer_set]]
/// layers = [5, 15, 22]
/// weights = [0.2, 0.3, 0.5]
/// ```
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceFile {
    ratios: Vec<f64>,
    layer_set: Vec<LayerSetEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerSetEntry {
    layers: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
}

pub fn parse_space(text: &str, origin: &Path) -> Result<CandidateSpace> {
    let err = |reason: String| Error::ConfigParse { path: origin.to_path_buf(), reason };
    let file: SpaceFile = toml::from_str(text).map_err(|e| err(e.to_string()))?;
    let sets = file
        .layer_set
        .into_iter()
        .map(|s| CandidateLayerSet { layers: s.layers, weights: s.weights })
        .collect();
    CandidateSpace::new(sets, file.ratios).map_err(|e| err(e.to_string()))
}

pub fn space_to_toml(space: &CandidateSpace) -> String {
    let file = SpaceFile {
        ratios: space.ratios.clone(),
        layer_set: space
            .layer_sets
            .iter()
            .map(|s| LayerSetEntry { layers: s.layers.clone(), weights: s.weights.clone() })
            .collect(),
    };
    toml::to_string(&file).expect("candidate space serializes")
}

pub fn load_space(path: &Path) -> Result<CandidateSpace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_space(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat(i: u32) -> CategoryId {
        CategoryId::new(i).unwrap()
    }

    fn weights(t: &ProfileTable, c: u32) -> Vec<(u32, f64)> {
        match &t.get(cat(c)).mode {
            ProfileMode::Weights { weights } => weights.iter().map(|(k, v)| (*k, *v)).collect(),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shipped_llava_table() {
        let t = builtin("llava").unwrap();
        assert_eq!(weights(&t, 0), vec![(5, 0.2), (15, 0.3), (22, 0.5)]);
        assert_eq!(weights(&t, 4), vec![(14, 0.2), (17, 0.3), (22, 0.5)]);
        assert_eq!(weights(&t, 7), vec![(3, 0.2), (12, 0.3), (18, 0.5)]);
        let ratios: Vec<f64> = t.profiles().iter().map(|p| p.split_ratio).collect();
        assert_eq!(ratios, vec![0.8, 0.4, 0.7, 0.7, 0.7, 0.6, 0.8, 0.2, 0.9]);
    }

    #[test]
    fn shipped_qwen_table() {
        let t = builtin("qwen25vl").unwrap();
        assert_eq!(weights(&t, 0), vec![(9, 0.2), (22, 0.3), (31, 0.5)]);
        assert_eq!(weights(&t, 6), vec![(18, 0.2), (22, 0.3), (28, 0.5)]);
        assert_eq!(weights(&t, 8), vec![(29, 0.2), (31, 0.8)]);
        assert_eq!(t.get(cat(1)).split_ratio, 0.4);
    }

    #[test]
    fn toml_round_trip() {
        for (name, _) in BUILTINS {
            let t = builtin(name).unwrap();
            let text = profiles_to_toml(&t, Some(name));
            assert_eq!(parse_profiles(&text, Path::new("x")).unwrap(), t);
        }
    }

    #[test]
    fn scores_mode_defaults_tau() {
        let mut text = String::new();
        for c in 0..9 {
            text.push_str(&format!(
                "[[profile]]\ncategory = {c}\nmode = \"scores\"\nsplit_ratio = 0.5\nscores = {{ \"1\" = 0.0, \"2\" = 1.0 }}\n"
            ));
        }
        let t = parse_profiles(&text, Path::new("x")).unwrap();
        assert_eq!(t.get(cat(3)).mode, ProfileMode::Scores { scores: [(1, 0.0), (2, 1.0)].into(), tau: 1.0 });
    }

    #[test]
    fn bad_profiles_are_rejected() {
        let one = "[[profile]]\ncategory = 0\nmode = \"weights\"\nsplit_ratio = 0.5\nweights = { \"1\" = 1.0 }\n";
        assert!(matches!(parse_profiles(one, Path::new("x")), Err(Error::ConfigParse { .. })));
        let mixed = "[[profile]]\ncategory = 0\nmode = \"weights\"\nsplit_ratio = 0.5\nscores = { \"1\" = 1.0 }\n";
        assert!(parse_profiles(mixed, Path::new("x")).is_err());
        let bad_key = "[[profile]]\ncategory = 0\nmode = \"weights\"\nsplit_ratio = 0.5\nweights = { \"x\" = 1.0 }\n";
        assert!(parse_profiles(bad_key, Path::new("x")).is_err());
    }

    #[test]
    fn space_round_trip() {
        let text = "ratios = [0.2, 0.4]\n[[layer_set]]\nlayers = [5, 22]\n[[layer_set]]\nlayers = [5, 15, 22]\nweights = [0.2, 0.3, 0.5]\n";
        let s = parse_space(text, Path::new("x")).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.layer_sets[1].weights.as_deref(), Some(&[0.2, 0.3, 0.5][..]));
        assert_eq!(parse_space(&space_to_toml(&s), Path::new("x")).unwrap(), s);
        assert!(parse_space("ratios = [1.5]\n[[layer_set]]\nlayers = [1]\n", Path::new("x")).is_err());
    }
}

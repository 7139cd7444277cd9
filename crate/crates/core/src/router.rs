//! Stage-one scene understanding: decide whether an image needs the low or
//! the high depth-range network.
//!
//! Two routers are provided. [`route_by_scene`] takes a majority vote over
//! the depth-range tags of the `k` most probable scene categories;
//! [`route_by_coarse_depth`] thresholds the maximum of a coarse depth map.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::DepthMap;
use crate::error::{Error, Result};

/// Number of top scene categories that vote.
pub const DEFAULT_TOP_K: usize = 15;
/// Coarse-depth threshold in meters; strictly greater routes to high.
pub const DEFAULT_SIGMA: f64 = 5.89;
/// Tolerance on `sum(p) == 1` for scene probability vectors.
pub const SCENE_PROB_TOLERANCE: f64 = 1e-4;

const DEFAULT_TABLE: &str = include_str!("../data/places365_depth_ranges.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthRange {
    Low,
    High,
}

impl fmt::Display for DepthRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DepthRange::Low => "low",
            DepthRange::High => "high",
        })
    }
}

impl FromStr for DepthRange {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "low" => Ok(DepthRange::Low),
            "high" => Ok(DepthRange::High),
            other => Err(Error::InvalidInput(format!(
                "depth-range tag must be `low` or `high`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneLabelTable {
    entries: Vec<(String, DepthRange)>,
}

impl SceneLabelTable {
    pub fn new(entries: Vec<(String, DepthRange)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("scene table is empty".into()));
        }
        let mut seen = HashSet::new();
        for (name, _) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateCategory(name.clone()));
            }
        }
        Ok(Self { entries })
    }

    /// The bundled 365-category table. Tags follow an indoor → low,
    /// outdoor → high heuristic and can be overridden with a user file.
    pub fn places365() -> Self {
        parse_scene_table(DEFAULT_TABLE, Path::new("<builtin places365>"))
            .expect("bundled table is well formed")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, DepthRange)] {
        &self.entries
    }

    pub fn tag(&self, i: usize) -> DepthRange {
        self.entries[i].1
    }

    pub fn tags(&self) -> impl Iterator<Item = DepthRange> + '_ {
        self.entries.iter().map(|(_, t)| *t)
    }
}

pub fn parse_scene_table(text: &str, path: &Path) -> Result<SceneLabelTable> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (name, tag) = line
            .rsplit_once(',')
            .ok_or_else(|| err(format!("expected `category_name,low|high`, got `{line}`")))?;
        let name = name.trim();
        if name.is_empty() {
            return Err(err("empty category name".into()));
        }
        let tag = tag.parse::<DepthRange>().map_err(|e| err(e.to_string()))?;
        if !seen.insert(name.to_string()) {
            return Err(Error::DuplicateCategory(name.to_string()));
        }
        entries.push((name.to_string(), tag));
    }
    SceneLabelTable::new(entries)
}

pub fn load_scene_table(path: impl AsRef<Path>) -> Result<SceneLabelTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene_table(&text, path)
}

/// Scene probabilities in table order.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneProbabilities(Vec<f64>);

impl SceneProbabilities {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidDistribution(format!("scene probability {v}")));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > SCENE_PROB_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "scene probabilities sum to {total}"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Reads a scene probability file: one `image_id,p_0,...,p_{n-1}` record per
/// line in table order, `#` comments allowed.
pub fn parse_scene_probabilities(text: &str, path: &Path) -> Result<Vec<(String, SceneProbabilities)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let mut fields = line.split(',');
        let id = fields.next().unwrap().trim().to_string();
        let values = fields
            .map(|f| f.trim().parse::<f64>().map_err(|e| err(format!("`{f}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let probs = SceneProbabilities::new(values).map_err(|e| err(e.to_string()))?;
        out.push((id, probs));
    }
    Ok(out)
}

pub fn load_scene_probabilities(path: impl AsRef<Path>) -> Result<Vec<(String, SceneProbabilities)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene_probabilities(&text, path)
}

pub fn format_scene_probabilities(records: &[(String, SceneProbabilities)]) -> String {
    let mut s = String::from("# image_id,probabilities in scene-table order\n");
    for (id, p) in records {
        s.push_str(id);
        for v in p.values() {
            s.push(',');
            s.push_str(&format!("{v:e}"));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMethod {
    SceneClassification,
    CoarseDepth,
    Forced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingEvidence {
    Votes { low_votes: usize, high_votes: usize, k: usize },
    MaxDepth { d_max: f64, sigma: f64 },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub range: DepthRange,
    pub method: RoutingMethod,
    pub evidence: RoutingEvidence,
}

impl RoutingDecision {
    pub fn forced(range: DepthRange) -> Self {
        Self {
            range,
            method: RoutingMethod::Forced,
            evidence: RoutingEvidence::None,
        }
    }
}

/// Indices of the `k` largest probabilities; equal probabilities keep table
/// order.
pub fn top_k_indices(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    // stable sort keeps table order among ties
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).expect("finite probabilities"));
    idx.truncate(k);
    idx
}

/// Majority vote over the tags of the `k` most probable categories. Low wins
/// only with strictly more than `k / 2` votes; an exact tie goes to high.
pub fn route_by_scene(p: &SceneProbabilities, table: &SceneLabelTable, k: usize) -> Result<RoutingDecision> {
    if p.values().len() != table.len() {
        return Err(Error::Dimension {
            expected: table.len(),
            got: p.values().len(),
        });
    }
    if k == 0 || k > table.len() {
        return Err(Error::InvalidInput(format!(
            "top-k must be in 1..={}, got {k}",
            table.len()
        )));
    }
    let low_votes = top_k_indices(p.values(), k)
        .into_iter()
        .filter(|&i| table.tag(i) == DepthRange::Low)
        .count();
    let range = if 2 * low_votes > k {
        DepthRange::Low
    } else {
        DepthRange::High
    };
    Ok(RoutingDecision {
        range,
        method: RoutingMethod::SceneClassification,
        evidence: RoutingEvidence::Votes {
            low_votes,
            high_votes: k - low_votes,
            k,
        },
    })
}

/// High iff the maximum valid coarse depth strictly exceeds `sigma`.
pub fn route_by_coarse_depth(coarse: &DepthMap, sigma: f64) -> Result<RoutingDecision> {
    let d_max = coarse.max_valid().ok_or(Error::EmptyEvidence)?;
    let range = if d_max > sigma {
        DepthRange::High
    } else {
        DepthRange::Low
    };
    Ok(RoutingDecision {
        range,
        method: RoutingMethod::CoarseDepth,
        evidence: RoutingEvidence::MaxDepth { d_max, sigma },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(tags: &[DepthRange]) -> SceneLabelTable {
        SceneLabelTable::new(
            tags.iter()
                .enumerate()
                .map(|(i, t)| (format!("scene_{i}"), *t))
                .collect(),
        )
        .unwrap()
    }

    /// 30 categories: probabilities decrease with index, the first 15 carry
    /// `n_low` low tags.
    fn fixture(n_low: usize) -> (SceneProbabilities, SceneLabelTable) {
        let mut tags = vec![DepthRange::High; 30];
        for t in tags.iter_mut().take(n_low) {
            *t = DepthRange::Low;
        }
        // rest (beyond top 15) all low, to prove they do not vote
        for t in tags.iter_mut().skip(15) {
            *t = DepthRange::Low;
        }
        let raw: Vec<f64> = (0..30).map(|i| 30.0 - i as f64).collect();
        let s: f64 = raw.iter().sum();
        (
            SceneProbabilities::new(raw.iter().map(|v| v / s).collect()).unwrap(),
            table(&tags),
        )
    }

    #[test]
    fn builtin_table_has_365_entries() {
        let t = SceneLabelTable::places365();
        assert_eq!(t.len(), 365);
        assert!(t.tags().any(|t| t == DepthRange::Low));
        assert!(t.tags().any(|t| t == DepthRange::High));
    }

    #[test]
    fn vote_threshold() {
        let (p, t) = fixture(8);
        let d = route_by_scene(&p, &t, 15).unwrap();
        assert_eq!(d.range, DepthRange::Low);
        assert_eq!(
            d.evidence,
            RoutingEvidence::Votes { low_votes: 8, high_votes: 7, k: 15 }
        );
        let (p, t) = fixture(7);
        assert_eq!(route_by_scene(&p, &t, 15).unwrap().range, DepthRange::High);
        let (p, t) = fixture(0);
        assert_eq!(route_by_scene(&p, &t, 15).unwrap().range, DepthRange::High);
    }

    #[test]
    fn even_k_tie_goes_high() {
        let (p, t) = fixture(5);
        // top 10: 5 low, 5 high
        assert_eq!(route_by_scene(&p, &t, 10).unwrap().range, DepthRange::High);
    }

    #[test]
    fn equal_probabilities_break_by_table_order() {
        let tags = [DepthRange::Low, DepthRange::High, DepthRange::High, DepthRange::Low];
        let p = SceneProbabilities::new(vec![0.25; 4]).unwrap();
        assert_eq!(top_k_indices(p.values(), 3), vec![0, 1, 2]);
        let d = route_by_scene(&p, &table(&tags), 1).unwrap();
        assert_eq!(d.range, DepthRange::Low);
        let d = route_by_scene(&p, &table(&tags), 3).unwrap();
        assert_eq!(d.range, DepthRange::High);
    }

    #[test]
    fn misaligned_vector() {
        let (p, _) = fixture(8);
        let t = table(&[DepthRange::Low; 5]);
        assert!(matches!(route_by_scene(&p, &t, 3), Err(Error::Dimension { .. })));
        let (p, t) = fixture(8);
        assert!(route_by_scene(&p, &t, 0).is_err());
        assert!(route_by_scene(&p, &t, 31).is_err());
    }

    #[test]
    fn coarse_threshold() {
        let d = |v: f64| DepthMap::new(1, 2, vec![1.0, v], vec![true, true]).unwrap();
        assert_eq!(route_by_coarse_depth(&d(6.0), DEFAULT_SIGMA).unwrap().range, DepthRange::High);
        assert_eq!(route_by_coarse_depth(&d(5.89), DEFAULT_SIGMA).unwrap().range, DepthRange::Low);
        assert_eq!(route_by_coarse_depth(&d(3.0), DEFAULT_SIGMA).unwrap().range, DepthRange::Low);
        assert!(matches!(
            route_by_coarse_depth(&DepthMap::invalid(2, 2), DEFAULT_SIGMA),
            Err(Error::EmptyEvidence)
        ));
    }

    #[test]
    fn masked_pixels_do_not_count() {
        let d = DepthMap::new(1, 2, vec![3.0, 50.0], vec![true, false]).unwrap();
        assert_eq!(route_by_coarse_depth(&d, DEFAULT_SIGMA).unwrap().range, DepthRange::Low);
    }

    #[test]
    fn table_parsing() {
        let p = Path::new("t.txt");
        let t = parse_scene_table("# c\nkitchen,low\n\nstreet , high\n", p).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.entries()[1], ("street".to_string(), DepthRange::High));
        match parse_scene_table("a,low\nb,low\na,high\n", p) {
            Err(Error::DuplicateCategory(n)) => assert_eq!(n, "a"),
            other => panic!("{other:?}"),
        }
        assert!(parse_scene_table("", p).is_err());
        assert!(parse_scene_table("# only comments\n", p).is_err());
        match parse_scene_table("a,low\nb;high\n", p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn probability_file_round_trip() {
        let recs = vec![
            ("img_a".to_string(), SceneProbabilities::new(vec![0.2, 0.8]).unwrap()),
            ("img_b".to_string(), SceneProbabilities::new(vec![1.0, 0.0]).unwrap()),
        ];
        let text = format_scene_probabilities(&recs);
        let back = parse_scene_probabilities(&text, Path::new("p.csv")).unwrap();
        assert_eq!(back, recs);
        assert!(parse_scene_probabilities("x,0.5,0.1\n", Path::new("p.csv")).is_err());
    }

    proptest! {
        #[test]
        fn top_k_membership_decides(
            raw in proptest::collection::vec(0.01f64..1.0, 20),
            tags in proptest::collection::vec(any::<bool>(), 20),
            gamma in 0.2f64..5.0,
            k in 1usize..=20,
        ) {
            let tags: Vec<DepthRange> = tags.iter().map(|&b| if b { DepthRange::Low } else { DepthRange::High }).collect();
            let t = table(&tags);
            let norm = |v: Vec<f64>| { let s: f64 = v.iter().sum(); v.into_iter().map(|x| x / s).collect::<Vec<_>>() };
            let p = SceneProbabilities::new(norm(raw.clone())).unwrap();
            // monotone transform preserves ordering and therefore the top-k set
            let q = SceneProbabilities::new(norm(raw.iter().map(|x| x.powf(gamma)).collect())).unwrap();
            let a = route_by_scene(&p, &t, k).unwrap();
            let b = route_by_scene(&q, &t, k).unwrap();
            if top_k_indices(p.values(), k) == top_k_indices(q.values(), k) {
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn coarse_is_monotone(vals in proptest::collection::vec(0.1f64..20.0, 1..30), bump in 0.0f64..10.0, which in 0usize..30) {
            let n = vals.len();
            let d = DepthMap::new(1, n, vals.clone(), vec![true; n]).unwrap();
            let mut v2 = vals;
            v2[which % n] += bump;
            let d2 = DepthMap::new(1, n, v2, vec![true; n]).unwrap();
            let a = route_by_coarse_depth(&d, DEFAULT_SIGMA).unwrap().range;
            let b = route_by_coarse_depth(&d2, DEFAULT_SIGMA).unwrap().range;
            prop_assert!(!(a == DepthRange::High && b == DepthRange::Low));
        }
    }
}

//! The three-level standards hierarchy (domains, clusters, standards) that
//! supplies the knowledge-component vocabulary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{read_to_string, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Domain,
    Cluster,
    Standard,
}

impl Level {
    pub fn child(self) -> Option<Level> {
        match self {
            Level::Domain => Some(Level::Cluster),
            Level::Cluster => Some(Level::Standard),
            Level::Standard => None,
        }
    }

    pub fn parent(self) -> Option<Level> {
        match self {
            Level::Domain => None,
            Level::Cluster => Some(Level::Domain),
            Level::Standard => Some(Level::Cluster),
        }
    }

    fn slot(self) -> usize {
        self as usize
    }

    const ALL: [Level; 3] = [Level::Domain, Level::Cluster, Level::Standard];
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Domain => "domain",
            Level::Cluster => "cluster",
            Level::Standard => "standard",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TaxonomyError {
    #[error("{level} `{id}` references missing parent `{parent}`")]
    Orphan { level: Level, id: String, parent: String },
    #[error("{level} `{id}` has no parent")]
    MissingParent { level: Level, id: String },
    #[error("{level} `{id}` has parent `{parent}` at the wrong level")]
    WrongParentLevel { level: Level, id: String, parent: String },
    #[error("duplicate {level} id `{id}`")]
    Duplicate { level: Level, id: String },
    #[error("parent links form a cycle through {ids:?}")]
    Cycle { ids: Vec<String> },
    #[error("unknown {level} id `{id}`")]
    UnknownId { level: Level, id: String },
    #[error("{level} nodes have no children")]
    NoChildLevel { level: Level },
    #[error("malformed taxonomy file: {0}")]
    Malformed(String),
}

/// One row of the taxonomy file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub level: Level,
    pub id: String,
    pub description: String,
    pub parent: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub level: Level,
    pub id: String,
    pub description: String,
    pub parent: Option<String>,
    /// Child ids, sorted.
    pub children: Vec<String>,
}

/// Validated, immutable forest of domains → clusters → standards.
#[derive(Debug, Clone, Default)]
pub struct Taxonomy {
    levels: [BTreeMap<String, Node>; 3],
}

impl Taxonomy {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        Ok(Self::from_json(&text)?)
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, TaxonomyError> {
        let specs: Vec<NodeSpec> = serde_json::from_str(text).map_err(|e| TaxonomyError::Malformed(e.to_string()))?;
        Self::from_specs(specs)
    }

    pub fn from_specs(specs: Vec<NodeSpec>) -> std::result::Result<Self, TaxonomyError> {
        let mut levels: [BTreeMap<String, Node>; 3] = Default::default();
        for spec in specs {
            let map = &mut levels[spec.level.slot()];
            if map.contains_key(&spec.id) {
                return Err(TaxonomyError::Duplicate {
                    level: spec.level,
                    id: spec.id,
                });
            }
            map.insert(
                spec.id.clone(),
                Node {
                    level: spec.level,
                    id: spec.id,
                    description: spec.description,
                    parent: spec.parent,
                    children: Vec::new(),
                },
            );
        }

        // Cycle detection over raw parent links, resolving a parent id at the
        // expected level first and then at any level.
        let lookup = |id: &str, preferred: Option<Level>| -> Option<Level> {
            preferred
                .into_iter()
                .chain(Level::ALL)
                .find(|l| levels[l.slot()].contains_key(id))
        };
        for level in Level::ALL {
            for node in levels[level.slot()].values() {
                let mut chain = vec![(level, node.id.clone())];
                let mut cur = (level, node.parent.clone());
                while let (cur_level, Some(parent)) = cur {
                    let Some(parent_level) = lookup(&parent, cur_level.parent()) else {
                        break;
                    };
                    if chain.iter().any(|(l, id)| *l == parent_level && *id == parent) {
                        chain.push((parent_level, parent));
                        return Err(TaxonomyError::Cycle {
                            ids: chain.into_iter().map(|(_, id)| id).collect(),
                        });
                    }
                    chain.push((parent_level, parent.clone()));
                    cur = (parent_level, levels[parent_level.slot()][&parent].parent.clone());
                }
            }
        }

        // Structural checks: every non-domain has exactly one parent one level up.
        let mut links = Vec::new();
        for level in Level::ALL {
            for node in levels[level.slot()].values() {
                match (level.parent(), &node.parent) {
                    (None, None) => {}
                    (None, Some(parent)) => {
                        return Err(TaxonomyError::WrongParentLevel {
                            level,
                            id: node.id.clone(),
                            parent: parent.clone(),
                        })
                    }
                    (Some(_), None) => {
                        return Err(TaxonomyError::MissingParent {
                            level,
                            id: node.id.clone(),
                        })
                    }
                    (Some(expected), Some(parent)) => {
                        if levels[expected.slot()].contains_key(parent) {
                            links.push((expected, parent.clone(), node.id.clone()));
                        } else if lookup(parent, None).is_some() {
                            return Err(TaxonomyError::WrongParentLevel {
                                level,
                                id: node.id.clone(),
                                parent: parent.clone(),
                            });
                        } else {
                            return Err(TaxonomyError::Orphan {
                                level,
                                id: node.id.clone(),
                                parent: parent.clone(),
                            });
                        }
                    }
                }
            }
        }
        for (level, parent, child) in links {
            levels[level.slot()].get_mut(&parent).expect("checked above").children.push(child);
        }
        for map in &mut levels {
            for node in map.values_mut() {
                node.children.sort();
            }
        }
        Ok(Taxonomy { levels })
    }

    /// All nodes as file rows, domains first.
    pub fn to_specs(&self) -> Vec<NodeSpec> {
        Level::ALL
            .iter()
            .flat_map(|l| self.levels[l.slot()].values())
            .map(|n| NodeSpec {
                level: n.level,
                id: n.id.clone(),
                description: n.description.clone(),
                parent: n.parent.clone(),
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_specs())?)
    }

    pub fn get(&self, level: Level, id: &str) -> Option<&Node> {
        self.levels[level.slot()].get(id)
    }

    pub fn nodes(&self, level: Level) -> impl Iterator<Item = &Node> {
        self.levels[level.slot()].values()
    }

    pub fn ids(&self, level: Level) -> Vec<String> {
        self.levels[level.slot()].keys().cloned().collect()
    }

    pub fn len(&self, level: Level) -> usize {
        self.levels[level.slot()].len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.iter().all(BTreeMap::is_empty)
    }

    pub fn contains(&self, level: Level, id: &str) -> bool {
        self.levels[level.slot()].contains_key(id)
    }

    pub fn parent_of(&self, level: Level, id: &str) -> Option<&Node> {
        let node = self.get(level, id)?;
        self.get(level.parent()?, node.parent.as_deref()?)
    }

    pub fn children_of(&self, level: Level, id: &str) -> std::result::Result<&[String], TaxonomyError> {
        self.get(level, id)
            .map(|n| n.children.as_slice())
            .ok_or_else(|| TaxonomyError::UnknownId {
                level,
                id: id.to_string(),
            })
    }

    /// Standard description, if the id is a known standard.
    pub fn standard_description(&self, id: &str) -> Option<&str> {
        self.get(Level::Standard, id).map(|n| n.description.as_str())
    }

    /// Every standard id mapped to its description.
    pub fn standard_descriptions(&self) -> std::collections::BTreeMap<String, String> {
        self.nodes(Level::Standard).map(|n| (n.id.clone(), n.description.clone())).collect()
    }

    /// Sorted union of the children of `ids` (all at `level`).
    pub fn children_union<'a, I>(&self, level: Level, ids: I) -> std::result::Result<Vec<String>, TaxonomyError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if level.child().is_none() {
            return Err(TaxonomyError::NoChildLevel { level });
        }
        let mut out = BTreeSet::new();
        for id in ids {
            out.extend(self.children_of(level, id)?.iter().cloned());
        }
        Ok(out.into_iter().collect())
    }

    /// Line-oriented `id: description` listing, sorted by id.
    ///
    /// Descriptions longer than `max_chars` are cut and end with `…`.
    pub fn render_candidates<'a, I>(&self, level: Level, ids: I, max_chars: Option<usize>) -> std::result::Result<String, TaxonomyError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut sorted: Vec<&str> = ids.into_iter().collect();
        sorted.sort_unstable();
        sorted.dedup();
        let mut lines = Vec::with_capacity(sorted.len());
        for id in sorted {
            let node = self.get(level, id).ok_or_else(|| TaxonomyError::UnknownId {
                level,
                id: id.to_string(),
            })?;
            lines.push(format!("{}: {}", node.id, truncate_description(&node.description, max_chars)));
        }
        Ok(lines.join("\n"))
    }
}

pub fn truncate_description(text: &str, max_chars: Option<usize>) -> String {
    match max_chars {
        Some(max) if text.chars().count() > max => {
            let mut out: String = text.chars().take(max.saturating_sub(1)).collect();
            out.push('…');
            out
        }
        _ => text.to_string(),
    }
}

/// The eleven grade-level domains of the Common Core math coherence map.
pub const COMMON_CORE_DOMAINS: [(&str, &str); 11] = [
    ("CC", "Counting and Cardinality"),
    ("OA", "Operations and Algebraic Thinking"),
    ("NBT", "Number and Operations in Base Ten"),
    ("NF", "Number and Operations - Fractions"),
    ("MD", "Measurement and Data"),
    ("G", "Geometry"),
    ("RP", "Ratios and Proportional Relationships"),
    ("NS", "The Number System"),
    ("EE", "Expressions and Equations"),
    ("F", "Functions"),
    ("SP", "Statistics and Probability"),
];

/// Domain and cluster codes implied by a standard code.
///
/// K-8 codes look like `8.EE.A.1` (cluster `8.EE.A`, domain `EE`); high-school
/// codes look like `HSG-GPE.B.6` (cluster `HSG-GPE.B`) and are folded into the
/// nearest grade-level domain by conceptual category.
pub fn codes_for_standard(id: &str) -> Option<(&'static str, String)> {
    let parts: Vec<&str> = id.split('.').collect();
    if let Some(rest) = parts[0].strip_prefix("HS") {
        if parts.len() < 3 {
            return None;
        }
        let category = rest.split('-').next()?;
        let domain = match category {
            "N" => "NS",
            "A" => "EE",
            "F" => "F",
            "G" => "G",
            "S" => "SP",
            _ => return None,
        };
        return Some((domain, parts[..2].join(".")));
    }
    if parts.len() < 4 {
        return None;
    }
    let domain = COMMON_CORE_DOMAINS.iter().find(|(code, _)| *code == parts[1])?.0;
    Some((domain, parts[..3].join(".")))
}

/// Imports standards from CSV with columns `id,description` and an optional
/// `cluster_description`, deriving clusters and domains from the codes.
pub fn import_standards_csv(text: &str) -> Result<Taxonomy> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| TaxonomyError::Malformed(e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(id_col), Some(desc_col)) = (col("id"), col("description")) else {
        return Err(TaxonomyError::Malformed("CSV needs `id` and `description` columns".into()).into());
    };
    let cluster_col = col("cluster_description");

    let mut specs: Vec<NodeSpec> = COMMON_CORE_DOMAINS
        .iter()
        .map(|(code, name)| NodeSpec {
            level: Level::Domain,
            id: code.to_string(),
            description: name.to_string(),
            parent: None,
        })
        .collect();
    let mut clusters: BTreeMap<String, (String, String)> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| TaxonomyError::Malformed(e.to_string()))?;
        let id = row.get(id_col).unwrap_or("").trim().to_string();
        let description = row.get(desc_col).unwrap_or("").trim().to_string();
        let Some((domain, cluster)) = codes_for_standard(&id) else {
            return Err(TaxonomyError::Malformed(format!("unrecognised standard code `{id}`")).into());
        };
        let cluster_desc = cluster_col
            .and_then(|c| row.get(c))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .unwrap_or_else(|| format!("Cluster {cluster}"));
        clusters.entry(cluster.clone()).or_insert((domain.to_string(), cluster_desc));
        specs.push(NodeSpec {
            level: Level::Standard,
            id,
            description,
            parent: Some(cluster),
        });
    }
    specs.extend(clusters.into_iter().map(|(id, (domain, description))| NodeSpec {
        level: Level::Cluster,
        id,
        description,
        parent: Some(domain),
    }));
    Ok(Taxonomy::from_specs(specs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(level: Level, id: &str, parent: Option<&str>) -> NodeSpec {
        NodeSpec {
            level,
            id: id.into(),
            description: format!("about {id}"),
            parent: parent.map(str::to_string),
        }
    }

    fn small() -> Taxonomy {
        Taxonomy::from_specs(vec![
            spec(Level::Domain, "D", None),
            spec(Level::Cluster, "D.A", Some("D")),
            spec(Level::Cluster, "D.B", Some("D")),
            spec(Level::Standard, "D.A.1", Some("D.A")),
            spec(Level::Standard, "D.A.2", Some("D.A")),
            spec(Level::Standard, "D.B.1", Some("D.B")),
        ])
        .unwrap()
    }

    #[test]
    fn synthetic_map_children() {
        let t = small();
        assert_eq!(t.children_of(Level::Domain, "D").unwrap().len(), 2);
        assert_eq!(t.len(Level::Standard), 3);
        let grand = t.parent_of(Level::Cluster, t.parent_of(Level::Standard, "D.B.1").unwrap().id.as_str());
        assert_eq!(grand.unwrap().level, Level::Domain);
    }

    #[test]
    fn missing_parent_cluster_names_the_standard() {
        let err = Taxonomy::from_specs(vec![
            spec(Level::Domain, "D", None),
            spec(Level::Standard, "D.Z.1", Some("D.Z")),
        ])
        .unwrap_err();
        assert_eq!(
            err,
            TaxonomyError::Orphan {
                level: Level::Standard,
                id: "D.Z.1".into(),
                parent: "D.Z".into()
            }
        );
        assert!(err.to_string().contains("D.Z.1"));
    }

    #[test]
    fn duplicate_and_cycle_and_level_errors() {
        let dup = Taxonomy::from_specs(vec![spec(Level::Domain, "D", None), spec(Level::Domain, "D", None)]);
        assert!(matches!(dup, Err(TaxonomyError::Duplicate { .. })));

        let cycle = Taxonomy::from_specs(vec![
            spec(Level::Cluster, "A", Some("B")),
            spec(Level::Cluster, "B", Some("A")),
        ]);
        assert!(matches!(cycle, Err(TaxonomyError::Cycle { .. })), "{cycle:?}");

        let wrong = Taxonomy::from_specs(vec![
            spec(Level::Domain, "D", None),
            spec(Level::Standard, "S", Some("D")),
        ]);
        assert!(matches!(wrong, Err(TaxonomyError::WrongParentLevel { .. })));

        let rootless = Taxonomy::from_specs(vec![spec(Level::Cluster, "C", None)]);
        assert!(matches!(rootless, Err(TaxonomyError::MissingParent { .. })));
    }

    #[test]
    fn children_union_cases() {
        let t = Taxonomy::from_specs(vec![
            spec(Level::Domain, "A", None),
            spec(Level::Domain, "B", None),
            spec(Level::Cluster, "A.2", Some("A")),
            spec(Level::Cluster, "A.1", Some("A")),
            spec(Level::Cluster, "B.1", Some("B")),
        ])
        .unwrap();
        assert_eq!(t.children_union(Level::Domain, ["B", "A"]).unwrap(), vec!["A.1", "A.2", "B.1"]);
        assert!(t.children_union(Level::Domain, std::iter::empty()).unwrap().is_empty());
        assert_eq!(t.children_union(Level::Domain, ["A", "A"]).unwrap(), vec!["A.1", "A.2"]);
        assert!(matches!(
            t.children_union(Level::Domain, ["Q"]),
            Err(TaxonomyError::UnknownId { .. })
        ));
        assert!(t.children_union(Level::Standard, std::iter::empty()).is_err());
    }

    #[test]
    fn render_candidates_is_sorted_and_stable() {
        let t = small();
        assert_eq!(t.render_candidates(Level::Standard, ["D.B.1"], None).unwrap(), "D.B.1: about D.B.1");
        let a = t.render_candidates(Level::Standard, ["D.B.1", "D.A.1"], None).unwrap();
        let b = t.render_candidates(Level::Standard, ["D.A.1", "D.B.1"], None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, "D.A.1: about D.A.1\nD.B.1: about D.B.1");
        assert_eq!(t.render_candidates(Level::Standard, std::iter::empty(), None).unwrap(), "");
        assert_eq!(
            t.render_candidates(Level::Standard, ["D.A.1"], Some(8)).unwrap(),
            "D.A.1: about D…"
        );
    }

    #[test]
    fn common_core_has_eleven_domains() {
        assert_eq!(COMMON_CORE_DOMAINS.len(), 11);
        let csv = "id,description,cluster_description\n\
                   8.EE.A.1,Know and apply the properties of integer exponents.,Work with radicals and integer exponents.\n\
                   HSG-GPE.B.6,Find the point on a directed line segment between two given points that partitions the segment in a given ratio.,\n\
                   K.CC.A.1,Count to 100 by ones and by tens.,Know number names and the count sequence.\n";
        let t = import_standards_csv(csv).unwrap();
        assert_eq!(t.len(Level::Domain), 11);
        assert_eq!(t.len(Level::Cluster), 3);
        assert_eq!(t.parent_of(Level::Standard, "HSG-GPE.B.6").unwrap().id, "HSG-GPE.B");
        assert_eq!(t.parent_of(Level::Cluster, "8.EE.A").unwrap().id, "EE");
        assert!(import_standards_csv("id,description\nnot-a-code,x\n").is_err());
    }

    #[test]
    fn json_round_trip() {
        let t = small();
        let back = Taxonomy::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back.to_specs(), t.to_specs());
    }

    proptest! {
        #[test]
        fn children_union_is_monotone(a in prop::collection::btree_set(0usize..6, 0..6), extra in prop::collection::btree_set(0usize..6, 0..6)) {
            let mut specs = Vec::new();
            for d in 0..6 {
                specs.push(spec(Level::Domain, &format!("D{d}"), None));
                for c in 0..3 {
                    // clusters shared by construction of ids only within a domain
                    specs.push(spec(Level::Cluster, &format!("D{d}.C{c}"), Some(&format!("D{d}"))));
                }
            }
            let t = Taxonomy::from_specs(specs).unwrap();
            let small_ids: Vec<String> = a.iter().map(|d| format!("D{d}")).collect();
            let big_ids: Vec<String> = a.union(&extra).map(|d| format!("D{d}")).collect();
            let small_u = t.children_union(Level::Domain, small_ids.iter().map(String::as_str)).unwrap();
            let big_u: BTreeSet<String> = t.children_union(Level::Domain, big_ids.iter().map(String::as_str)).unwrap().into_iter().collect();
            prop_assert!(small_u.iter().all(|c| big_u.contains(c)));
        }
    }
}

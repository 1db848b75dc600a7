//! Concept variables, classes, distances, and the concept graph.
//!
//! A concept space is an ordered list of named variables, each with a finite
//! value set. A concept class fixes one value per variable and is the unit
//! the generative model is conditioned on. Distance between classes is the
//! number of positions at which their assignments differ; the concept graph
//! joins classes at distance exactly 1.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named axis of variation with its ordered value labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptVariable {
    pub name: String,
    pub values: Vec<String>,
}

impl ConceptVariable {
    pub fn new(name: impl Into<String>, values: &[&str]) -> Self {
        ConceptVariable {
            name: name.into(),
            values: values.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn cardinality(&self) -> usize {
        self.values.len()
    }
}

/// The ordered schema of class-defining variables.
///
/// Free variables (location, angle, within-class jitter) are deliberately
/// not part of the space; they are nuisance parameters of the renderer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpace {
    variables: Vec<ConceptVariable>,
}

impl ConceptSpace {
    /// Validates the schema: at least one variable, every variable with at
    /// least two uniquely-labelled values, unique variable names.
    pub fn new(variables: Vec<ConceptVariable>) -> Result<Self> {
        if variables.is_empty() {
            return Err(Error::Schema("concept space has no variables".into()));
        }
        let mut names = BTreeSet::new();
        for v in &variables {
            if v.values.len() < 2 {
                return Err(Error::Schema(format!(
                    "variable `{}` has {} value(s); need at least 2",
                    v.name,
                    v.values.len()
                )));
            }
            let labels: BTreeSet<&String> = v.values.iter().collect();
            if labels.len() != v.values.len() {
                return Err(Error::Schema(format!(
                    "variable `{}` has duplicate value labels",
                    v.name
                )));
            }
            if !names.insert(v.name.clone()) {
                return Err(Error::Schema(format!("duplicate variable name `{}`", v.name)));
            }
        }
        Ok(ConceptSpace { variables })
    }

    /// The default 3-variable space: shape, color, size. Class `000` is a
    /// large red circle; `111` a small blue triangle.
    pub fn default3() -> Self {
        ConceptSpace::new(vec![
            ConceptVariable::new("shape", &["circle", "triangle"]),
            ConceptVariable::new("color", &["red", "blue"]),
            ConceptVariable::new("size", &["large", "small"]),
        ])
        .expect("builtin space is valid")
    }

    /// The 4-variable extension with a background variable.
    pub fn default4() -> Self {
        ConceptSpace::new(vec![
            ConceptVariable::new("shape", &["circle", "triangle"]),
            ConceptVariable::new("color", &["red", "blue"]),
            ConceptVariable::new("size", &["large", "small"]),
            ConceptVariable::new("background", &["white", "black"]),
        ])
        .expect("builtin space is valid")
    }

    pub fn variables(&self) -> &[ConceptVariable] {
        &self.variables
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn variable_named(&self, name: &str) -> Option<(usize, &ConceptVariable)> {
        self.variables
            .iter()
            .enumerate()
            .find(|(_, v)| v.name == name)
    }

    /// Total class count, `prod k_i`.
    pub fn num_classes(&self) -> usize {
        self.variables.iter().map(|v| v.values.len()).product()
    }

    /// Width of the conditioning vector produced by [`encode_class`].
    pub fn encoding_width(&self) -> usize {
        self.variables
            .iter()
            .map(|v| if v.values.len() == 2 { 1 } else { v.values.len() })
            .sum()
    }

    /// True when `class` is a well-formed assignment for this space.
    pub fn contains(&self, class: &ConceptClass) -> bool {
        class.assignment.len() == self.variables.len()
            && class
                .assignment
                .iter()
                .zip(&self.variables)
                .all(|(&a, v)| (a as usize) < v.values.len())
    }

    fn check_member(&self, class: &ConceptClass) -> Result<()> {
        if self.contains(class) {
            Ok(())
        } else {
            Err(Error::Schema(format!(
                "class {class} is not a member of this {}-variable space",
                self.variables.len()
            )))
        }
    }

    /// All classes of the space in lexicographic assignment order. This
    /// order is canonical everywhere (logs, reports, graphs).
    pub fn enumerate_classes(&self) -> Vec<ConceptClass> {
        let p = self.variables.len();
        let mut out = Vec::with_capacity(self.num_classes());
        let mut cur = vec![0u8; p];
        loop {
            out.push(ConceptClass {
                assignment: cur.clone(),
            });
            // lexicographic increment, least-significant position last
            let mut i = p;
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                cur[i] += 1;
                if (cur[i] as usize) < self.variables[i].values.len() {
                    break;
                }
                cur[i] = 0;
            }
        }
    }

    /// Hamming distance between two class assignments.
    pub fn concept_distance(&self, a: &ConceptClass, b: &ConceptClass) -> Result<u32> {
        self.check_member(a)?;
        self.check_member(b)?;
        Ok(a.assignment
            .iter()
            .zip(&b.assignment)
            .filter(|(x, y)| x != y)
            .count() as u32)
    }

    /// Minimum concept distance from `c` to any class in `training`.
    pub fn distance_to_set(&self, c: &ConceptClass, training: &[ConceptClass]) -> Result<u32> {
        if training.is_empty() {
            return Err(Error::Argument(
                "distance_to_set requires a non-empty training set".into(),
            ));
        }
        let mut best = u32::MAX;
        for t in training {
            best = best.min(self.concept_distance(c, t)?);
        }
        Ok(best)
    }

    /// Conditioning vector for a class: binary variables contribute their
    /// value index as a single 0/1 entry; variables with more than two
    /// values contribute a one-hot block. Injective over the class set.
    pub fn encode_class(&self, c: &ConceptClass) -> Result<Vec<f32>> {
        self.check_member(c)?;
        let mut out = Vec::with_capacity(self.encoding_width());
        for (&a, v) in c.assignment.iter().zip(&self.variables) {
            if v.values.len() == 2 {
                out.push(a as f32);
            } else {
                for j in 0..v.values.len() {
                    out.push(if j == a as usize { 1.0 } else { 0.0 });
                }
            }
        }
        Ok(out)
    }

    /// Parse a class from its canonical digit string, e.g. `"011"`.
    pub fn parse_class(&self, s: &str) -> Result<ConceptClass> {
        let digits: Vec<u8> = s
            .chars()
            .map(|ch| {
                ch.to_digit(10)
                    .map(|d| d as u8)
                    .ok_or_else(|| Error::Format(format!("class string `{s}` has non-digit `{ch}`")))
            })
            .collect::<Result<_>>()?;
        let class = ConceptClass { assignment: digits };
        self.check_member(&class)?;
        Ok(class)
    }

    /// Build a class from value labels, e.g. `["circle", "red", "large"]`.
    pub fn class_from_labels(&self, labels: &[&str]) -> Result<ConceptClass> {
        if labels.len() != self.variables.len() {
            return Err(Error::Schema(format!(
                "expected {} labels, got {}",
                self.variables.len(),
                labels.len()
            )));
        }
        let mut assignment = Vec::with_capacity(labels.len());
        for (lab, v) in labels.iter().zip(&self.variables) {
            let idx = v.values.iter().position(|x| x == lab).ok_or_else(|| {
                Error::Schema(format!("`{lab}` is not a value of variable `{}`", v.name))
            })?;
            assignment.push(idx as u8);
        }
        Ok(ConceptClass { assignment })
    }

    /// Human-readable value labels of a class, in variable order.
    pub fn labels_of(&self, c: &ConceptClass) -> Result<Vec<&str>> {
        self.check_member(c)?;
        Ok(c.assignment
            .iter()
            .zip(&self.variables)
            .map(|(&a, v)| v.values[a as usize].as_str())
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({ "variables": self.variables }))
            .expect("space serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            variables: Vec<ConceptVariable>,
        }
        let doc: Doc =
            serde_json::from_str(s).map_err(|e| Error::Format(format!("space json: {e}")))?;
        ConceptSpace::new(doc.variables)
    }
}

/// A full assignment of value indices, one per variable of its space.
///
/// Classes are plain data; all operations that need schema context take the
/// space explicitly and validate membership.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptClass {
    assignment: Vec<u8>,
}

impl ConceptClass {
    pub fn from_indices(indices: &[u8]) -> Self {
        ConceptClass {
            assignment: indices.to_vec(),
        }
    }

    pub fn indices(&self) -> &[u8] {
        &self.assignment
    }

    pub fn value_index(&self, variable: usize) -> usize {
        self.assignment[variable] as usize
    }
}

impl fmt::Display for ConceptClass {
    /// Canonical digit-string form, e.g. `011`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for a in &self.assignment {
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

/// The concept graph: all classes of a space as nodes, edges joining pairs
/// at concept distance exactly 1.
#[derive(Debug, Clone)]
pub struct ConceptGraph {
    space: ConceptSpace,
    nodes: Vec<ConceptClass>,
    /// Index pairs (i, j) with i < j into `nodes`.
    edges: Vec<(usize, usize)>,
}

impl ConceptGraph {
    pub fn space(&self) -> &ConceptSpace {
        &self.space
    }

    pub fn nodes(&self) -> &[ConceptClass] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges
            .iter()
            .filter(|(a, b)| *a == node || *b == node)
            .count()
    }
}

/// Enumerate all nodes and connect classes at distance 1.
pub fn build_graph(space: &ConceptSpace) -> ConceptGraph {
    let nodes = space.enumerate_classes();
    let mut edges = Vec::new();
    for i in 0..nodes.len() {
        for j in (i + 1)..nodes.len() {
            let d = space
                .concept_distance(&nodes[i], &nodes[j])
                .expect("enumerated classes are members");
            if d == 1 {
                edges.push((i, j));
            }
        }
    }
    ConceptGraph {
        space: space.clone(),
        nodes,
        edges,
    }
}

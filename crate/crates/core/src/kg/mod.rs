//! Embedded knowledge graph built from extracted entities.
//!
//! Each entity becomes a node labelled with its type. Object-valued properties
//! become child nodes (`HAS_CHILD`), and every distinct source line of an
//! entity becomes a `Line` node (`HAS_LINE`) that the text index covers.

mod query;
mod text;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::extraction::EntityRecord;

pub use query::{parse_query, Query, ResultTable};
pub use text::{parse_text_query, TextHit, TextIndex, TextQuery};

pub const LINE_LABEL: &str = "Line";
pub const TEXT_PROPERTY: &str = "text";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "HAS_CHILD")]
    HasChild,
    #[serde(rename = "HAS_LINE")]
    HasLine,
}

impl Relation {
    pub fn as_str(self) -> &'static str {
        match self {
            Relation::HasChild => "HAS_CHILD",
            Relation::HasLine => "HAS_LINE",
        }
    }

    pub fn parse(s: &str) -> Option<Relation> {
        match s {
            "HAS_CHILD" => Some(Relation::HasChild),
            "HAS_LINE" => Some(Relation::HasLine),
            _ => None,
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub label: String,
    pub properties: Map<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub relation: Relation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct GraphFile {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

/// Immutable after construction; safe to query from many threads.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    outgoing: Vec<Vec<(Relation, usize)>>,
    incoming: Vec<Vec<(Relation, usize)>>,
    by_label: BTreeMap<String, Vec<usize>>,
    text: TextIndex,
}

/// `interface` -> `Interface`, `ip_address` -> `IpAddress`.
pub fn label_for_property(name: &str) -> String {
    let label: String = name
        .split(|c: char| c == '_' || c == '-' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .map(|p| {
            let mut cs = p.chars();
            match cs.next() {
                Some(f) => f.to_uppercase().chain(cs).collect::<String>(),
                None => String::new(),
            }
        })
        .collect();
    if label.is_empty() {
        "Child".into()
    } else {
        label
    }
}

struct Builder {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

impl Builder {
    fn add_node(&mut self, label: String, properties: Map<String, Value>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            label,
            properties,
        });
        id
    }

    /// Adds a node for `object`, splitting nested objects into children.
    fn add_object(&mut self, label: String, object: &Map<String, Value>) -> usize {
        let mut scalars = Map::new();
        let mut children: Vec<(&str, &Map<String, Value>)> = Vec::new();
        for (k, v) in object {
            match v {
                Value::Object(o) => children.push((k, o)),
                Value::Array(items) if items.iter().any(Value::is_object) => {
                    for item in items {
                        if let Value::Object(o) = item {
                            children.push((k, o));
                        }
                    }
                    let rest: Vec<Value> =
                        items.iter().filter(|i| !i.is_object()).cloned().collect();
                    if !rest.is_empty() {
                        scalars.insert(k.clone(), Value::Array(rest));
                    }
                }
                other => {
                    scalars.insert(k.clone(), other.clone());
                }
            }
        }
        let id = self.add_node(label, scalars);
        for (k, o) in children {
            let child = self.add_object(label_for_property(k), o);
            self.edges.push(Edge {
                from: id,
                to: child,
                relation: Relation::HasChild,
            });
        }
        id
    }
}

impl KnowledgeGraph {
    pub fn build(entities: &[EntityRecord]) -> Self {
        let mut b = Builder {
            nodes: Vec::new(),
            edges: Vec::new(),
        };
        for e in entities {
            let id = b.add_object(e.entity_type.clone(), &e.properties);
            let mut seen = BTreeSet::new();
            for line in &e.input_data {
                if !seen.insert(line.as_str()) {
                    continue;
                }
                let mut props = Map::new();
                props.insert(TEXT_PROPERTY.into(), Value::String(line.clone()));
                let line_id = b.add_node(LINE_LABEL.into(), props);
                b.edges.push(Edge {
                    from: id,
                    to: line_id,
                    relation: Relation::HasLine,
                });
            }
        }
        Self::from_parts(b.nodes, b.edges).expect("builder output is consistent")
    }

    /// Rebuilds indexes (including the text index) over stored nodes and edges.
    pub fn from_parts(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self> {
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Input(format!(
                    "node ids must be 0..n in order; found {} at position {i}",
                    n.id
                )));
            }
            if n.label.is_empty() {
                return Err(Error::Input(format!("node {i} has an empty label")));
            }
        }
        let mut outgoing = vec![Vec::new(); nodes.len()];
        let mut incoming = vec![Vec::new(); nodes.len()];
        for e in &edges {
            if e.from >= nodes.len() || e.to >= nodes.len() || e.from == e.to {
                return Err(Error::Input(format!(
                    "invalid edge {} -[{}]-> {}",
                    e.from, e.relation, e.to
                )));
            }
            outgoing[e.from].push((e.relation, e.to));
            incoming[e.to].push((e.relation, e.from));
        }
        let mut by_label: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for n in &nodes {
            by_label.entry(n.label.clone()).or_default().push(n.id);
        }
        let text = TextIndex::build(nodes.iter().filter(|n| n.label == LINE_LABEL).map(|n| {
            (
                n.id,
                n.properties
                    .get(TEXT_PROPERTY)
                    .and_then(Value::as_str)
                    .unwrap_or_default(),
            )
        }));
        Ok(KnowledgeGraph {
            nodes,
            edges,
            outgoing,
            incoming,
            by_label,
            text,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes_with_label(&self, label: &str) -> &[usize] {
        self.by_label.get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.by_label.contains_key(label)
    }

    pub fn outgoing(&self, id: usize) -> &[(Relation, usize)] {
        &self.outgoing[id]
    }

    pub fn incoming(&self, id: usize) -> &[(Relation, usize)] {
        &self.incoming[id]
    }

    /// Texts of the `Line` nodes attached to `id`, in insertion order.
    pub fn lines_of(&self, id: usize) -> Vec<&str> {
        self.outgoing[id]
            .iter()
            .filter(|(r, _)| *r == Relation::HasLine)
            .filter_map(|(_, to)| self.nodes[*to].properties.get(TEXT_PROPERTY)?.as_str())
            .collect()
    }

    pub fn text_index(&self) -> &TextIndex {
        &self.text
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn to_json(&self) -> String {
        let file = GraphFile {
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
        };
        serde_json::to_string_pretty(&file).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile =
            serde_json::from_str(text).map_err(|e| Error::json("graph.json", e))?;
        Self::from_parts(file.nodes, file.edges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn export_schema(&self) -> GraphSchemaSummary {
        let mut props: BTreeMap<&str, BTreeMap<&str, BTreeSet<&'static str>>> = BTreeMap::new();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for n in &self.nodes {
            *counts.entry(&n.label).or_default() += 1;
            let entry = props.entry(&n.label).or_default();
            for (k, v) in &n.properties {
                entry.entry(k).or_default().insert(json_type(v));
            }
        }
        let labels = props
            .into_iter()
            .map(|(label, ps)| LabelSummary {
                label: label.to_string(),
                count: counts[label],
                properties: ps
                    .into_iter()
                    .map(|(name, types)| PropertySummary {
                        name: name.to_string(),
                        value_type: types.into_iter().collect::<Vec<_>>().join("|"),
                    })
                    .collect(),
            })
            .collect();

        let mut rels: BTreeMap<(Relation, &str, &str), usize> = BTreeMap::new();
        for e in &self.edges {
            *rels
                .entry((e.relation, &self.nodes[e.from].label, &self.nodes[e.to].label))
                .or_default() += 1;
        }
        let relations = rels
            .into_iter()
            .map(|((relation, from, to), count)| RelationSummary {
                relation: relation.as_str().to_string(),
                from_label: from.to_string(),
                to_label: to.to_string(),
                count,
            })
            .collect();
        GraphSchemaSummary { labels, relations }
    }

    pub fn run_query(&self, query: &str) -> Result<ResultTable> {
        let q = parse_query(query)?;
        Ok(q.execute(self))
    }

    /// Ranked `Line` nodes matching a text query, with their parent entity.
    pub fn text_search(&self, query: &str, limit: usize) -> Result<Vec<TextHit>> {
        let q = parse_text_query(query)?;
        Ok(self
            .text
            .search(&q, limit)
            .into_iter()
            .map(|(line, score)| TextHit {
                line,
                parent: self.incoming[line]
                    .iter()
                    .find(|(r, _)| *r == Relation::HasLine)
                    .map(|(_, p)| *p),
                score,
            })
            .collect())
    }
}

fn json_type(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_i64() || n.is_u64() => "integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertySummary {
    pub name: String,
    pub value_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub label: String,
    pub count: usize,
    pub properties: Vec<PropertySummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSummary {
    pub relation: String,
    pub from_label: String,
    pub to_label: String,
    pub count: usize,
}

/// Label, property and relation inventory, sorted lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GraphSchemaSummary {
    pub labels: Vec<LabelSummary>,
    pub relations: Vec<RelationSummary>,
}

impl GraphSchemaSummary {
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty() && self.relations.is_empty()
    }
}

impl fmt::Display for GraphSchemaSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Node labels:")?;
        for l in &self.labels {
            let props: Vec<String> = l
                .properties
                .iter()
                .map(|p| format!("{}: {}", p.name, p.value_type))
                .collect();
            writeln!(f, "  {} ({} nodes) {{{}}}", l.label, l.count, props.join(", "))?;
        }
        writeln!(f, "Relationships:")?;
        for r in &self.relations {
            writeln!(f, "  (:{})-[{}]->(:{})", r.from_label, r.relation, r.to_label)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn entity(t: &str, props: Value, lines: &[&str]) -> EntityRecord {
        EntityRecord {
            entity_type: t.into(),
            properties: props.as_object().unwrap().clone(),
            input_data: lines.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn empty_graph() {
        let g = KnowledgeGraph::build(&[]);
        assert!(g.is_empty());
        assert!(g.export_schema().is_empty());
    }

    #[test]
    fn counting_example() {
        let e = entity(
            "Device",
            json!({"hostname": "r1", "version": "15.2", "snmp": {"community": "public"}}),
            &["hostname r1", "version 15.2", "snmp-server community public"],
        );
        let g = KnowledgeGraph::build(&[e]);
        let count = |l: &str| g.nodes_with_label(l).len();
        assert_eq!(count("Device"), 1);
        assert_eq!(count("Snmp"), 1);
        assert_eq!(count(LINE_LABEL), 3);
        assert_eq!(g.node(0).properties.len(), 2);
        let rel = |r| g.edges().iter().filter(|e| e.relation == r).count();
        assert_eq!(rel(Relation::HasChild), 1);
        assert_eq!(rel(Relation::HasLine), 3);
    }

    #[test]
    fn duplicate_lines_collapse_within_entity_only() {
        let a = entity("A", json!({}), &["same", "same"]);
        let b = entity("A", json!({}), &["same"]);
        let g = KnowledgeGraph::build(&[a, b]);
        assert_eq!(g.nodes_with_label(LINE_LABEL).len(), 2);
        assert_eq!(g.lines_of(0), vec!["same"]);
    }

    #[test]
    fn arrays_of_objects_become_children() {
        let e = entity(
            "Device",
            json!({"hostname": "r1", "interface": [{"name": "Gi0/0"}, {"name": "Gi0/1"}], "tags": ["a", "b"]}),
            &["x"],
        );
        let g = KnowledgeGraph::build(&[e]);
        assert_eq!(g.nodes_with_label("Interface").len(), 2);
        assert_eq!(g.node(0).properties["tags"], json!(["a", "b"]));
    }

    #[test]
    fn json_round_trip_rebuilds_indexes() {
        let e = entity("A", json!({"k": 1}), &["alpha beta", "gamma"]);
        let g = KnowledgeGraph::build(&[e]);
        let back = KnowledgeGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back.nodes(), g.nodes());
        assert_eq!(back.edges(), g.edges());
        assert_eq!(back.text_search("gamma", 10).unwrap().len(), 1);
    }

    #[test]
    fn bad_edges_are_rejected() {
        let nodes = vec![Node {
            id: 0,
            label: "A".into(),
            properties: Map::new(),
        }];
        let self_loop = Edge {
            from: 0,
            to: 0,
            relation: Relation::HasChild,
        };
        assert!(KnowledgeGraph::from_parts(nodes, vec![self_loop]).is_err());
    }

    #[test]
    fn schema_summary_is_sorted_and_stable() {
        let es = vec![
            entity("Zeta", json!({"b": 1, "a": "x"}), &["l1"]),
            entity("Alpha", json!({"n": {"m": true}}), &["l2"]),
        ];
        let g = KnowledgeGraph::build(&es);
        let s = g.export_schema();
        let labels: Vec<&str> = s.labels.iter().map(|l| l.label.as_str()).collect();
        assert_eq!(labels, ["Alpha", "Line", "N", "Zeta"]);
        let zeta = &s.labels[3];
        assert_eq!(zeta.properties[0].name, "a");
        assert_eq!(zeta.properties[1].value_type, "integer");
        assert_eq!(s, g.export_schema());
        let text = s.to_string();
        assert!(text.contains("(:Alpha)-[HAS_CHILD]->(:N)"));
    }

    #[test]
    fn property_labels() {
        assert_eq!(label_for_property("interface"), "Interface");
        assert_eq!(label_for_property("ip_address"), "IpAddress");
        assert_eq!(label_for_property("__"), "Child");
    }
}
